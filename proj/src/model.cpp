#include "finedeb/model.hpp"

#include <cstring>
#include <fstream>

#include "finedeb/common.hpp"

namespace finedeb {

void ModelConfig::validate() const {
  if (vocab_size == 0) fail("ModelConfig: vocab_size must be positive");
  if (max_len < 8) fail("ModelConfig: max_len must be >= 8");
  if (n_heads == 0 || d_model == 0 || n_layers == 0 || d_ff == 0)
    fail("ModelConfig: dimensions must be positive");
  if (d_model % n_heads != 0)
    fail("ModelConfig: d_model " + std::to_string(d_model) +
         " not divisible by n_heads " + std::to_string(n_heads));
}

std::string phase_name(Phase p) {
  switch (p) {
    case Phase::pretrained: return "pretrained";
    case Phase::debiased: return "debiased";
    case Phase::finetuned: return "finetuned";
  }
  fail("phase_name: invalid phase");
}

Phase phase_from_name(const std::string& s) {
  if (s == "pretrained") return Phase::pretrained;
  if (s == "debiased") return Phase::debiased;
  if (s == "finetuned") return Phase::finetuned;
  fail("unknown phase tag: " + s);
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("encoder.token_embedding", token_embedding);
  out.emplace_back("encoder.position_embedding", position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    const auto& L = layers[l];
    out.emplace_back(p + "ln1_gain", L.ln1_gain);
    out.emplace_back(p + "ln1_bias", L.ln1_bias);
    out.emplace_back(p + "wq", L.wq);
    out.emplace_back(p + "bq", L.bq);
    out.emplace_back(p + "wk", L.wk);
    out.emplace_back(p + "bk", L.bk);
    out.emplace_back(p + "wv", L.wv);
    out.emplace_back(p + "bv", L.bv);
    out.emplace_back(p + "wo", L.wo);
    out.emplace_back(p + "bo", L.bo);
    out.emplace_back(p + "ln2_gain", L.ln2_gain);
    out.emplace_back(p + "ln2_bias", L.ln2_bias);
    out.emplace_back(p + "ff_w1", L.ff_w1);
    out.emplace_back(p + "ff_b1", L.ff_b1);
    out.emplace_back(p + "ff_w2", L.ff_w2);
    out.emplace_back(p + "ff_b2", L.ff_b2);
  }
  out.emplace_back("encoder.final_gain", final_gain);
  out.emplace_back("encoder.final_bias", final_bias);
  return out;
}

std::vector<Tensor> EncoderParams::all() const {
  std::vector<Tensor> out;
  for (auto& [n, t] : named()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> LMHeadParams::named() const {
  return {{"head.projection", projection}, {"head.bias", bias}};
}

std::vector<Tensor> LMHeadParams::all() const { return {projection, bias}; }

namespace {

std::uint64_t hash_named(const std::vector<std::pair<std::string, Tensor>>& named) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : named) {
    h = fnv1a(name, h);
    h = hash_doubles(t.values(), h);
  }
  return h;
}

Tensor gaussian(Shape shape, Rng& rng, double std_dev) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * std_dev;
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

Tensor ones_param(Shape shape) {
  std::vector<double> v(shape_numel(shape), 1.0);
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

std::uint64_t EncoderParams::hash() const { return hash_named(named()); }
std::uint64_t LMHeadParams::hash() const { return hash_named(named()); }

std::pair<EncoderParams, LMHeadParams> init_params(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t d = cfg.d_model, v = cfg.vocab_size, f = cfg.d_ff;
  const double std_dev = 0.02;
  EncoderParams enc;
  enc.token_embedding = gaussian({v, d}, rng, std_dev);
  enc.position_embedding = gaussian({cfg.max_len, d}, rng, std_dev);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams L;
    L.ln1_gain = ones_param({d});
    L.ln1_bias = zeros_param({d});
    L.wq = gaussian({d, d}, rng, std_dev);
    L.bq = zeros_param({d});
    L.wk = gaussian({d, d}, rng, std_dev);
    L.bk = zeros_param({d});
    L.wv = gaussian({d, d}, rng, std_dev);
    L.bv = zeros_param({d});
    L.wo = gaussian({d, d}, rng, std_dev);
    L.bo = zeros_param({d});
    L.ln2_gain = ones_param({d});
    L.ln2_bias = zeros_param({d});
    L.ff_w1 = gaussian({d, f}, rng, std_dev);
    L.ff_b1 = zeros_param({f});
    L.ff_w2 = gaussian({f, d}, rng, std_dev);
    L.ff_b2 = zeros_param({d});
    enc.layers.push_back(std::move(L));
  }
  enc.final_gain = ones_param({d});
  enc.final_bias = zeros_param({d});
  LMHeadParams head;
  head.projection = gaussian({d, v}, rng, std_dev);
  head.bias = zeros_param({v});
  return {std::move(enc), std::move(head)};
}

std::vector<int> Batch::flat_ids() const {
  std::vector<int> out;
  for (const auto& s : seqs) out.insert(out.end(), s.ids.begin(), s.ids.end());
  return out;
}

std::vector<double> Batch::additive_key_mask() const {
  std::vector<double> out;
  for (const auto& s : seqs)
    for (int m : s.attention_mask) out.push_back(m ? 0.0 : -1e30);
  return out;
}

Tensor forward_hidden(const EncoderParams& enc, const ModelConfig& cfg,
                      const Batch& batch) {
  if (batch.seqs.empty()) fail("forward_hidden: empty batch");
  const std::size_t L = cfg.max_len;
  for (const auto& s : batch.seqs)
    if (s.ids.size() != L) fail("forward_hidden: sequence length != max_len");
  std::vector<int> pos_ids;
  pos_ids.reserve(batch.seqs.size() * L);
  for (std::size_t b = 0; b < batch.seqs.size(); ++b)
    for (std::size_t i = 0; i < L; ++i) pos_ids.push_back(static_cast<int>(i));
  const auto key_mask = batch.additive_key_mask();

  Tensor x = add(embedding_lookup(enc.token_embedding, batch.flat_ids()),
                 embedding_lookup(enc.position_embedding, pos_ids));
  for (const auto& layer : enc.layers) {
    Tensor a = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
    Tensor q = add(matmul(a, layer.wq), layer.bq);
    Tensor k = add(matmul(a, layer.wk), layer.bk);
    Tensor v = add(matmul(a, layer.wv), layer.bv);
    Tensor attn = multi_head_attention(q, k, v, batch.seqs.size(), L,
                                       cfg.n_heads, key_mask);
    x = add(x, add(matmul(attn, layer.wo), layer.bo));
    Tensor h = layer_norm(x, layer.ln2_gain, layer.ln2_bias);
    Tensor ff = add(matmul(gelu(add(matmul(h, layer.ff_w1), layer.ff_b1)),
                           layer.ff_w2),
                    layer.ff_b2);
    x = add(x, ff);
  }
  return layer_norm(x, enc.final_gain, enc.final_bias);
}

Tensor forward_logits(const EncoderParams& enc, const LMHeadParams& head,
                      const ModelConfig& cfg, const Batch& batch) {
  Tensor hidden = forward_hidden(enc, cfg, batch);
  return add(matmul(hidden, head.projection), head.bias);
}

Tensor cls_embedding(const Tensor& hidden, const ModelConfig& cfg,
                     std::size_t seq_index) {
  return rows_select(hidden, {seq_index * cfg.max_len});
}

Tensor span_embedding(const Tensor& hidden, const ModelConfig& cfg,
                      const Batch& batch, std::size_t seq_index) {
  if (seq_index >= batch.seqs.size()) fail("span_embedding: bad sequence index");
  const auto& span = batch.seqs[seq_index].target_span;
  if (!span) fail("span_embedding: sequence has no target span");
  const std::size_t base = seq_index * cfg.max_len;
  return mean_over_span(hidden, base + span->first, base + span->second);
}

// ---- checkpoint io ----
// Layout (little-endian): magic "FDEB", u32 version, 7 u64 config fields,
// u8 phase, u32 record count, then records of
// {u32 name_len, name, u32 rank, u32 dims[rank], f64 values[]}.

namespace {

constexpr char kMagic[4] = {'F', 'D', 'E', 'B'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(std::string("load_checkpoint: truncated file while reading ") + what);
  return v;
}

void write_record(std::ostream& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
  for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.values().data()),
            static_cast<std::streamsize>(t.values().size() * sizeof(double)));
}

void read_record_into(std::istream& in, const std::string& expect_name, Tensor& t) {
  const auto name_len = get<std::uint32_t>(in, "record name length");
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  if (!in) fail("load_checkpoint: truncated record name");
  if (name != expect_name)
    fail("load_checkpoint: unexpected parameter '" + name + "', expected '" +
         expect_name + "'");
  const auto rank = get<std::uint32_t>(in, "record rank");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i)
    shape.push_back(get<std::uint32_t>(in, "record dim"));
  if (shape != t.shape())
    fail("load_checkpoint: shape mismatch for '" + name + "': file " +
         shape_str(shape) + " vs config " + shape_str(t.shape()));
  in.read(reinterpret_cast<char*>(t.values().data()),
          static_cast<std::streamsize>(t.values().size() * sizeof(double)));
  if (!in) fail("load_checkpoint: truncated values for '" + name + "'");
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("save_checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  const auto& c = ckpt.config;
  for (std::uint64_t v : {static_cast<std::uint64_t>(c.vocab_size),
                          static_cast<std::uint64_t>(c.max_len),
                          static_cast<std::uint64_t>(c.d_model),
                          static_cast<std::uint64_t>(c.n_layers),
                          static_cast<std::uint64_t>(c.n_heads),
                          static_cast<std::uint64_t>(c.d_ff), c.seed})
    put<std::uint64_t>(out, v);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(ckpt.phase));
  auto records = ckpt.encoder.named();
  for (auto& r : ckpt.head.named()) records.push_back(r);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) write_record(out, name, t);
  if (!out) fail("save_checkpoint: write failure on " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    fail("load_checkpoint: bad magic in " + path);
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kVersion)
    fail("load_checkpoint: unknown format version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.config.vocab_size = get<std::uint64_t>(in, "vocab_size");
  ckpt.config.max_len = get<std::uint64_t>(in, "max_len");
  ckpt.config.d_model = get<std::uint64_t>(in, "d_model");
  ckpt.config.n_layers = get<std::uint64_t>(in, "n_layers");
  ckpt.config.n_heads = get<std::uint64_t>(in, "n_heads");
  ckpt.config.d_ff = get<std::uint64_t>(in, "d_ff");
  ckpt.config.seed = get<std::uint64_t>(in, "seed");
  ckpt.config.validate();
  const auto phase = get<std::uint8_t>(in, "phase");
  if (phase > 2) fail("load_checkpoint: invalid phase tag");
  ckpt.phase = static_cast<Phase>(phase);
  auto [enc, head] = init_params(ckpt.config);
  ckpt.encoder = std::move(enc);
  ckpt.head = std::move(head);
  auto records = ckpt.encoder.named();
  for (auto& r : ckpt.head.named()) records.push_back(r);
  const auto count = get<std::uint32_t>(in, "record count");
  if (count != records.size())
    fail("load_checkpoint: record count " + std::to_string(count) +
         " does not match expected " + std::to_string(records.size()));
  for (auto& [name, t] : records) read_record_into(in, name, t);
  char extra;
  if (in.read(&extra, 1)) fail("load_checkpoint: trailing bytes in " + path);
  return ckpt;
}

Checkpoint clone_checkpoint(const Checkpoint& ckpt) {
  Checkpoint out;
  out.config = ckpt.config;
  out.phase = ckpt.phase;
  auto [enc, head] = init_params(ckpt.config);
  out.encoder = std::move(enc);
  out.head = std::move(head);
  auto src = ckpt.encoder.named();
  for (auto& r : ckpt.head.named()) src.push_back(r);
  auto dst = out.encoder.named();
  for (auto& r : out.head.named()) dst.push_back(r);
  for (std::size_t i = 0; i < src.size(); ++i)
    dst[i].second.values() = src[i].second.values();
  return out;
}

}  // namespace finedeb
