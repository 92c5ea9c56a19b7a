#include "ctun/config_file.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "ctun/error.hpp"

namespace ctun {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end)
    throw ValueError("config: bad value '" + v + "' for " + key);
  return out;
}

BlockCounts parse_blocks(const std::string& v) {
  std::vector<int> n;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) n.push_back(parse_number<int>("blocks", trim(part)));
  if (n.size() != 3) throw ValueError("config: blocks needs three comma-separated counts, got '" + v + "'");
  return BlockCounts{n[0], n[1], n[2]};
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValueError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ValueError("config line " + std::to_string(lineno) + ": empty key or value");
    if (!kv.emplace(key, value).second)
      throw ValueError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_key_values(ss.str());
}

void apply_config(const KeyValues& kv, CtunConfig& m, TrainConfig& t) {
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto i32 = [](int& f) -> Setter { return [&f](auto& k, auto& v) { f = parse_number<int>(k, v); }; };
  auto f64 = [](double& f) -> Setter { return [&f](auto& k, auto& v) { f = parse_number<double>(k, v); }; };
  const std::map<std::string, Setter> setters{
      {"channels", i32(m.channels)},
      {"blocks", [&m](auto&, auto& v) { m.blocks = parse_blocks(v); }},
      {"scale", i32(m.scale)},
      {"ugru_variant", [&m](auto&, auto& v) { m.ugru_variant = parse_ugru_variant(v); }},
      {"boundary_policy",
       [](auto&, auto& v) {
         if (v != "replicate") throw ValueError("config: boundary_policy must be replicate");
       }},
      {"lr0", f64(t.lr0)},
      {"lr_min", f64(t.lr_min)},
      {"beta1", f64(t.beta1)},
      {"beta2", f64(t.beta2)},
      {"adam_eps", f64(t.adam_eps)},
      {"iters", i32(t.iters)},
      {"patch", i32(t.patch)},
      {"batch", i32(t.batch)},
      {"frames", i32(t.frames)},
      {"lr_size", i32(t.lr_size)},
      {"sequences", i32(t.sequences)},
      {"charbonnier_eps", f64(t.charbonnier_eps)},
      {"fft_weight", f64(t.fft_weight)},
      {"seed", [&t](auto& k, auto& v) { t.seed = parse_number<std::uint64_t>(k, v); }},
  };
  for (const auto& [key, value] : kv) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ValueError("config: unknown key '" + key + "'");
    it->second(key, value);
  }
}

CtunConfig infer_model_config(const ParamStore& params) {
  if (!params.contains("extract.conv_in.weight"))
    throw ValueError("weights lack extract.conv_in.weight; cannot infer the model configuration");
  CtunConfig cfg;
  cfg.channels = params.get("extract.conv_in.weight").shape().n;
  auto count = [&](const std::string& prefix) {
    int n = 0;
    while (params.contains(prefix + std::to_string(n) + ".conv0.weight")) ++n;
    return n;
  };
  cfg.blocks = BlockCounts{count("extract.block"), count("prop.block"), count("recon.block")};
  cfg.ugru_variant = params.contains("hu.ugru.expand.weight") ? UgruVariant::split : UgruVariant::shared;
  cfg.scale = params.contains("recon.up1.weight") ? 4 : 2;
  check_params(cfg, params);
  return cfg;
}

std::string format_model_config(const CtunConfig& cfg) {
  std::ostringstream os;
  os << "channels = " << cfg.channels << "\n"
     << "blocks = " << cfg.blocks.extractor << "," << cfg.blocks.propagation << ","
     << cfg.blocks.reconstruction << "\n"
     << "scale = " << cfg.scale << "\n"
     << "ugru_variant = " << to_string(cfg.ugru_variant) << "\n";
  return os.str();
}

}  // namespace ctun
