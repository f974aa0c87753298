#include "finedeb/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "finedeb/common.hpp"

namespace finedeb {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ';')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join_list(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ";" : "") + v[i];
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    return std::stoull(v);
  } catch (...) {
    fail("config: bad integer for " + key + ": '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    return std::stod(v);
  } catch (...) {
    fail("config: bad number for " + key + ": '" + v + "'");
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

void set_train(TrainConfig& t, const std::string& field, const std::string& key,
               const std::string& v) {
  if (field == "batch_size") t.batch_size = to_size(key, v);
  else if (field == "lr") t.lr = to_double(key, v);
  else if (field == "max_epochs") t.max_epochs = to_size(key, v);
  else if (field == "patience") t.patience = to_size(key, v);
  else if (field == "min_delta") t.min_delta = to_double(key, v);
  else if (field == "validation_fraction") t.validation_fraction = to_double(key, v);
  else if (field == "mask_rate") t.mask_rate = to_double(key, v);
  else if (field == "distance") {
    if (v == "mse") t.distance = Distance::mse;
    else if (v == "cosine") t.distance = Distance::cosine;
    else fail("config: unknown distance '" + v + "' for " + key);
  } else
    fail("config: unknown key " + key);
}

void put_train(std::map<std::string, std::string>& kv, const std::string& prefix,
               const TrainConfig& t) {
  kv[prefix + ".batch_size"] = std::to_string(t.batch_size);
  kv[prefix + ".lr"] = fmt(t.lr);
  kv[prefix + ".max_epochs"] = std::to_string(t.max_epochs);
  kv[prefix + ".patience"] = std::to_string(t.patience);
  kv[prefix + ".min_delta"] = fmt(t.min_delta);
  kv[prefix + ".validation_fraction"] = fmt(t.validation_fraction);
  kv[prefix + ".mask_rate"] = fmt(t.mask_rate);
  kv[prefix + ".distance"] = t.distance == Distance::mse ? "mse" : "cosine";
}

}  // namespace

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.pretrain.max_epochs = 100;
  c.debias.max_epochs = 30;
  c.lm.max_epochs = 100;
  return c;
}

void ExperimentConfig::validate_paths() const {
  for (const auto& p :
       {word_lists_path, templates_path, corpus_path, stereoset_path, crows_path}) {
    if (!p.empty() && !std::filesystem::exists(p))
      fail("config: referenced path does not exist: " + p);
  }
  for (const auto& p : seat_paths)
    if (!std::filesystem::exists(p))
      fail("config: referenced path does not exist: " + p);
}

std::map<std::string, std::string> ExperimentConfig::to_map() const {
  std::map<std::string, std::string> kv;
  kv["paths.word_lists"] = word_lists_path;
  kv["paths.templates"] = templates_path;
  kv["paths.corpus"] = corpus_path;
  kv["paths.stereoset"] = stereoset_path;
  kv["paths.crows"] = crows_path;
  kv["paths.seat"] = join_list(seat_paths);
  kv["demographic.name"] = demographic_name;
  kv["demographic.class_count"] = std::to_string(demographic_classes);
  kv["model.max_len"] = std::to_string(model.max_len);
  kv["model.d_model"] = std::to_string(model.d_model);
  kv["model.n_layers"] = std::to_string(model.n_layers);
  kv["model.n_heads"] = std::to_string(model.n_heads);
  kv["model.d_ff"] = std::to_string(model.d_ff);
  kv["vocab.min_count"] = std::to_string(vocab_min_count);
  put_train(kv, "train.pretrain", pretrain);
  put_train(kv, "train.debias", debias);
  put_train(kv, "train.lm", lm);
  kv["debias.sample_size"] = std::to_string(debias_sample_size);
  kv["lm.corpus_fraction"] = fmt(lm_corpus_fraction);
  {
    std::vector<std::string> v;
    for (auto s : sweep_debias_sizes) v.push_back(std::to_string(s));
    kv["sweep.debias_sizes"] = join_list(v);
  }
  {
    std::vector<std::string> v;
    for (auto f : sweep_lm_fractions) v.push_back(fmt(f));
    kv["sweep.lm_fractions"] = join_list(v);
  }
  kv["seed"] = std::to_string(seed);
  return kv;
}

std::string ExperimentConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : to_map()) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t ExperimentConfig::digest() const { return fnv1a(serialize()); }

void ExperimentConfig::apply_override(const std::string& key,
                                      const std::string& value) {
  const std::string v = trim(value);
  if (key == "paths.word_lists") word_lists_path = v;
  else if (key == "paths.templates") templates_path = v;
  else if (key == "paths.corpus") corpus_path = v;
  else if (key == "paths.stereoset") stereoset_path = v;
  else if (key == "paths.crows") crows_path = v;
  else if (key == "paths.seat") seat_paths = split_list(v);
  else if (key == "demographic.name") demographic_name = v;
  else if (key == "demographic.class_count") demographic_classes = to_size(key, v);
  else if (key == "model.max_len") model.max_len = to_size(key, v);
  else if (key == "model.d_model") model.d_model = to_size(key, v);
  else if (key == "model.n_layers") model.n_layers = to_size(key, v);
  else if (key == "model.n_heads") model.n_heads = to_size(key, v);
  else if (key == "model.d_ff") model.d_ff = to_size(key, v);
  else if (key == "vocab.min_count") vocab_min_count = to_size(key, v);
  else if (key.rfind("train.pretrain.", 0) == 0)
    set_train(pretrain, key.substr(15), key, v);
  else if (key.rfind("train.debias.", 0) == 0)
    set_train(debias, key.substr(13), key, v);
  else if (key.rfind("train.lm.", 0) == 0) set_train(lm, key.substr(9), key, v);
  else if (key == "debias.sample_size") debias_sample_size = to_size(key, v);
  else if (key == "lm.corpus_fraction") lm_corpus_fraction = to_double(key, v);
  else if (key == "sweep.debias_sizes") {
    sweep_debias_sizes.clear();
    for (const auto& s : split_list(v)) sweep_debias_sizes.push_back(to_size(key, s));
  } else if (key == "sweep.lm_fractions") {
    sweep_lm_fractions.clear();
    for (const auto& s : split_list(v)) sweep_lm_fractions.push_back(to_double(key, s));
  } else if (key == "seed") {
    seed = to_size(key, v);
  } else {
    fail("config: unknown key " + key);
  }
}

ExperimentConfig ExperimentConfig::from_map(
    const std::map<std::string, std::string>& kv) {
  ExperimentConfig c = default_config();
  for (const auto& [k, v] : kv) c.apply_override(k, v);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot open " + path);
  ExperimentConfig c = default_config();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      fail("config: missing '=' on line " + std::to_string(lineno) + " of " + path);
    c.apply_override(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return c;
}

}  // namespace finedeb
