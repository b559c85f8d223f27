#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "abisim/io.hpp"
#include "abisim/nn/checkpoint.hpp"

namespace abisim::nn {

namespace {

template <typename Scalar>
std::string fingerprint_impl(const ParamList<Scalar>& params) {
  std::string bytes;
  for (const auto& p : params) {
    bytes += p.name;
    bytes.append(reinterpret_cast<const char*>(p.value->data()),
                 std::size_t(p.value->size()) * sizeof(Scalar));
  }
  return sha256_hex(bytes);
}

}  // namespace

std::string fingerprint(const ParamList<float>& params) { return fingerprint_impl(params); }
std::string fingerprint(const ParamList<double>& params) { return fingerprint_impl(params); }

nlohmann::json to_json(const EncoderSpec& spec) {
  return {{"in_channels", spec.in_channels}, {"height", spec.height},
          {"width", spec.width},             {"channels", spec.channels},
          {"strides", spec.strides},         {"embed_dim", spec.embed_dim}};
}

EncoderSpec encoder_spec_from_json(const nlohmann::json& j) {
  EncoderSpec s;
  s.in_channels = j.at("in_channels").get<int>();
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  s.channels = j.at("channels").get<std::array<int, 3>>();
  s.strides = j.at("strides").get<std::array<int, 3>>();
  s.embed_dim = j.at("embed_dim").get<int>();
  return s;
}

void ParamArchive::add(const ParamList<float>& params) {
  for (const auto& p : params) {
    Array a;
    a.rows = p.value->rows();
    a.cols = p.value->cols();
    a.values.assign(p.value->data(), p.value->data() + p.value->size());
    arrays_[p.name] = std::move(a);
  }
}

void ParamArchive::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::string blob;
  nlohmann::json index = nlohmann::json::object();
  for (const auto& [name, a] : arrays_) {
    index[name] = {{"offset", blob.size()}, {"shape", {a.rows, a.cols}}};
    for (float v : a.values) {
      const std::uint32_t u = std::bit_cast<std::uint32_t>(v);
      for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
  }
  write_text(dir / "params.bin", blob);
  write_json(dir / "params.json", {{"format", "abisim-params"},
                                   {"version", 1},
                                   {"dtype", "float32le"},
                                   {"order", "column-major"},
                                   {"arrays", index},
                                   {"meta", meta}});
}

ParamArchive ParamArchive::load(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "params.json") || !std::filesystem::exists(dir / "params.bin")) {
    throw DependencyError("no checkpoint at " + dir.string());
  }
  const nlohmann::json j = read_json(dir / "params.json");
  if (j.value("format", std::string()) != "abisim-params") {
    throw ShapeError("params.json: not an abisim parameter index");
  }
  const std::string blob = read_text(dir / "params.bin");
  ParamArchive archive;
  archive.meta = j.value("meta", nlohmann::json::object());
  for (const auto& [name, entry] : j.at("arrays").items()) {
    Array a;
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    a.rows = entry.at("shape")[0].get<Eigen::Index>();
    a.cols = entry.at("shape")[1].get<Eigen::Index>();
    const std::size_t n = std::size_t(a.rows * a.cols);
    if (offset + 4 * n > blob.size()) throw ShapeError("params.bin: array '" + name + "' truncated");
    a.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) {
        u |= std::uint32_t(static_cast<unsigned char>(blob[offset + 4 * i + b])) << (8 * b);
      }
      a.values[i] = std::bit_cast<float>(u);
    }
    archive.arrays_[name] = std::move(a);
  }
  return archive;
}

void ParamArchive::assign(const ParamList<float>& params, const std::string& from_prefix,
                          const std::string& to_prefix) const {
  std::vector<std::string> problems;
  for (const auto& p : params) {
    if (p.name.rfind(to_prefix, 0) != 0) continue;
    const std::string source = from_prefix + p.name.substr(to_prefix.size());
    auto it = arrays_.find(source);
    if (it == arrays_.end()) {
      problems.push_back(source + " (missing)");
      continue;
    }
    if (it->second.rows != p.value->rows() || it->second.cols != p.value->cols()) {
      std::ostringstream os;
      os << source << " (checkpoint " << it->second.rows << "x" << it->second.cols << ", model "
         << p.value->rows() << "x" << p.value->cols() << ")";
      problems.push_back(os.str());
    }
  }
  if (!problems.empty()) {
    std::string msg = "incompatible checkpoint arrays:";
    for (const auto& s : problems) msg += " " + s + ";";
    throw ShapeError(msg);
  }
  for (const auto& p : params) {
    if (p.name.rfind(to_prefix, 0) != 0) continue;
    const auto& a = arrays_.at(from_prefix + p.name.substr(to_prefix.size()));
    std::memcpy(p.value->data(), a.values.data(), a.values.size() * sizeof(float));
  }
}

}  // namespace abisim::nn
