#include "fgvl/config.hpp"

#include <sstream>

namespace fgvl::config {

std::map<std::string, std::string> parse_flat_toml(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim_copy(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    FGVL_CHECK(eq != std::string::npos,
               "config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim_copy(t.substr(0, eq));
    std::string value = trim_copy(t.substr(eq + 1));
    // strip trailing comment outside quotes
    if (!value.empty() && value[0] != '"') {
      size_t hash = value.find('#');
      if (hash != std::string::npos) value = trim_copy(value.substr(0, hash));
    }
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    FGVL_CHECK(!key.empty(), "config line " + std::to_string(lineno) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

namespace {
template <typename T, typename F>
void maybe(const std::map<std::string, std::string>& kv, const std::string& key, T& out,
           F parse) {
  auto it = kv.find(key);
  if (it == kv.end()) return;
  try {
    out = parse(it->second);
  } catch (const std::exception&) {
    fail("config key '" + key + "': cannot parse value '" + it->second + "'");
  }
}
double to_f(const std::string& s) { return std::stod(s); }
long long to_i(const std::string& s) { return std::stoll(s); }
bool to_b(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  fail("expected true/false, got '" + s + "'");
}
std::string id(const std::string& s) { return s; }
}  // namespace

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& kv) {
  RunConfig c;
  auto& t = c.train;
  maybe(kv, "lr", t.lr, to_f);
  maybe(kv, "lr_min", t.lr_min, to_f);
  maybe(kv, "restart_period", t.restart_period, [](auto& s) { return int(to_i(s)); });
  maybe(kv, "restart_mult", t.restart_mult, [](auto& s) { return int(to_i(s)); });
  maybe(kv, "epochs", t.epochs, [](auto& s) { return size_t(to_i(s)); });
  maybe(kv, "batch_size", t.batch_size, [](auto& s) { return size_t(to_i(s)); });
  maybe(kv, "mask_prob", t.mask_prob, to_f);
  maybe(kv, "loss_mode", t.loss_mode, [](auto& s) { return model::loss_mode_from_string(s); });
  maybe(kv, "temperature", t.temperature, to_f);
  maybe(kv, "seed", t.seed, [](auto& s) { return uint64_t(to_i(s)); });
  maybe(kv, "use_entity", t.use_entity, to_b);
  maybe(kv, "use_fg", t.use_fg, to_b);
  maybe(kv, "use_iki", t.use_iki, to_b);
  maybe(kv, "use_ssm", t.use_ssm, to_b);
  maybe(kv, "d_img", t.d_img, [](auto& s) { return size_t(to_i(s)); });
  maybe(kv, "d_txt", t.d_txt, [](auto& s) { return size_t(to_i(s)); });
  maybe(kv, "embed_dim", t.embed_dim, [](auto& s) { return size_t(to_i(s)); });
  maybe(kv, "conv1_channels", t.conv1_channels, [](auto& s) { return size_t(to_i(s)); });
  maybe(kv, "conv2_channels", t.conv2_channels, [](auto& s) { return size_t(to_i(s)); });
  maybe(kv, "text_encoder", t.text_encoder, id);
  maybe(kv, "ssm_provider", t.ssm_provider, id);
  maybe(kv, "ssm_dim", t.ssm_dim, [](auto& s) { return size_t(to_i(s)); });

  maybe(kv, "corpus_kind", c.corpus_kind, id);
  maybe(kv, "manifest", c.manifest_path, id);
  maybe(kv, "eval_manifest", c.eval_manifest_path, id);
  maybe(kv, "dictionary", c.dictionary_path, id);
  maybe(kv, "synthetic_n_train", c.synthetic_n_train, [](auto& s) { return size_t(to_i(s)); });
  maybe(kv, "synthetic_n_eval", c.synthetic_n_eval, [](auto& s) { return size_t(to_i(s)); });
  maybe(kv, "image_size", c.image_size, [](auto& s) { return uint32_t(to_i(s)); });
  maybe(kv, "out_dir", c.out_dir, id);
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  return from_map(parse_flat_toml(read_text_file(path)));
}

std::string RunConfig::to_toml() const {
  std::ostringstream out;
  const auto& t = train;
  out << "# effective run configuration\n";
  out << "lr = " << t.lr << "\n";
  out << "lr_min = " << t.lr_min << "\n";
  out << "restart_period = " << t.restart_period << "\n";
  out << "restart_mult = " << t.restart_mult << "\n";
  out << "epochs = " << t.epochs << "\n";
  out << "batch_size = " << t.batch_size << "\n";
  out << "mask_prob = " << t.mask_prob << "\n";
  out << "loss_mode = \"" << model::to_string(t.loss_mode) << "\"\n";
  out << "temperature = " << t.temperature << "\n";
  out << "seed = " << t.seed << "\n";
  out << "use_entity = " << (t.use_entity ? "true" : "false") << "\n";
  out << "use_fg = " << (t.use_fg ? "true" : "false") << "\n";
  out << "use_iki = " << (t.use_iki ? "true" : "false") << "\n";
  out << "use_ssm = " << (t.use_ssm ? "true" : "false") << "\n";
  out << "d_img = " << t.d_img << "\n";
  out << "d_txt = " << t.d_txt << "\n";
  out << "embed_dim = " << t.embed_dim << "\n";
  out << "conv1_channels = " << t.conv1_channels << "\n";
  out << "conv2_channels = " << t.conv2_channels << "\n";
  out << "text_encoder = \"" << t.text_encoder << "\"\n";
  out << "ssm_provider = \"" << t.ssm_provider << "\"\n";
  out << "ssm_dim = " << t.ssm_dim << "\n";
  out << "corpus_kind = \"" << corpus_kind << "\"\n";
  out << "manifest = \"" << manifest_path << "\"\n";
  out << "eval_manifest = \"" << eval_manifest_path << "\"\n";
  out << "dictionary = \"" << dictionary_path << "\"\n";
  out << "synthetic_n_train = " << synthetic_n_train << "\n";
  out << "synthetic_n_eval = " << synthetic_n_eval << "\n";
  out << "image_size = " << image_size << "\n";
  out << "out_dir = \"" << out_dir << "\"\n";
  return out.str();
}

std::vector<std::string> RunConfig::violations() const {
  std::vector<std::string> v = train.violations();
  if (corpus_kind != "synthetic" && corpus_kind != "manifest")
    v.push_back("corpus_kind must be 'synthetic' or 'manifest'");
  if (corpus_kind == "manifest" && manifest_path.empty())
    v.push_back("manifest path required when corpus_kind is 'manifest'");
  if (image_size < 16) v.push_back("image_size must be >= 16");
  return v;
}

}  // namespace fgvl::config
