#pragma once

#include "json.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "abisim/nn/modules.hpp"

namespace abisim::nn {

nlohmann::json to_json(const EncoderSpec& spec);
EncoderSpec encoder_spec_from_json(const nlohmann::json& j);

/// Named float32 arrays as stored on disk: `params.bin` (little-endian, column-major arrays
/// back to back) indexed by `params.json` (name -> byte offset and shape).
class ParamArchive {
public:
  struct Array {
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::vector<float> values;
  };

  ParamArchive() = default;

  /// Captures `params`, storing parameter `p.name` under `p.name`.
  void add(const ParamList<float>& params);

  void save(const std::filesystem::path& dir) const;
  static ParamArchive load(const std::filesystem::path& dir);

  /// Copies every array named `from_prefix + suffix` into the parameter named
  /// `to_prefix + suffix`. Throws ShapeError listing missing or mismatched arrays.
  void assign(const ParamList<float>& params, const std::string& from_prefix,
              const std::string& to_prefix) const;

  bool contains(const std::string& name) const { return arrays_.count(name) > 0; }
  const std::map<std::string, Array>& arrays() const { return arrays_; }

  nlohmann::json meta;

private:
  std::map<std::string, Array> arrays_;
};

}  // namespace abisim::nn
