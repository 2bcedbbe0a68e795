#include "selmask/model.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

#include "selmask/error.hpp"
#include "selmask/rng.hpp"

namespace selmask {

namespace {

using Vector = Eigen::VectorXd;

constexpr double kLayerNormEps = 1e-6;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

void add_bias(Matrix& x, const Matrix& b) { x.rowwise() += b.row(0); }

struct LayerNormCache {
  Matrix xhat;
  Vector inv_std;
};

Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, LayerNormCache* cache) {
  Vector mean = x.rowwise().mean();
  Matrix centered = x.colwise() - mean;
  Vector var = centered.array().square().rowwise().mean();
  Vector inv_std = (var.array() + kLayerNormEps).rsqrt();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix y = xhat.array().rowwise() * gamma.row(0).array();
  add_bias(y, beta);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& gamma, const LayerNormCache& c, Matrix& dgamma,
                           Matrix& dbeta) {
  dgamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbeta += dy.colwise().sum();
  Matrix dxhat = dy.array().rowwise() * gamma.row(0).array();
  Vector mean_d = dxhat.rowwise().mean();
  Vector mean_dx = (dxhat.array() * c.xhat.array()).rowwise().mean();
  Matrix dx = dxhat.colwise() - mean_d;
  dx -= (c.xhat.array().colwise() * mean_dx.array()).matrix();
  return dx.array().colwise() * c.inv_std.array();
}

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) {
    double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    return 0.5 * v * (1.0 + t);
  });
}

Matrix gelu_grad(const Matrix& x) {
  return x.unaryExpr([](double v) {
    double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
  });
}

void softmax_rows(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

Matrix dropout_mask(Rng* rng, double p, Eigen::Index rows, Eigen::Index cols) {
  if (rng == nullptr || p <= 0.0) return {};
  const double keep = 1.0 - p;
  Matrix mask(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) mask(i, j) = rng->uniform() < keep ? 1.0 / keep : 0.0;
  return mask;
}

struct LayerCache {
  Matrix input;
  Matrix q, k, v;
  std::vector<Matrix> probs;
  Matrix concat;
  Matrix attn_mask;
  LayerNormCache ln1;
  Matrix h1;
  Matrix f1;
  Matrix g;
  Matrix ffn_mask;
  LayerNormCache ln2;
};

struct EncoderCache {
  std::vector<TokenId> framed;
  LayerNormCache emb_ln;
  Matrix emb_mask;
  std::vector<LayerCache> layers;
};

void check_input(const Parameters& params, std::span<const TokenId> ids) {
  const auto& cfg = params.config;
  if (ids.size() > cfg.max_content_length())
    throw std::invalid_argument("input of " + std::to_string(ids.size()) + " tokens exceeds model limit of " +
                                std::to_string(cfg.max_content_length()));
  for (TokenId id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw std::invalid_argument("token id " + std::to_string(id) + " outside model vocabulary");
}

Matrix encode(const Parameters& p, std::span<const TokenId> ids, EncoderCache* cache, Rng* rng) {
  check_input(p, ids);
  const auto& cfg = p.config;
  const auto d = static_cast<Eigen::Index>(cfg.dim);
  std::vector<TokenId> framed;
  framed.reserve(ids.size() + 2);
  framed.push_back(kClsId);
  framed.insert(framed.end(), ids.begin(), ids.end());
  framed.push_back(kSepId);
  const auto len = static_cast<Eigen::Index>(framed.size());

  Matrix x(len, d);
  for (Eigen::Index i = 0; i < len; ++i) x.row(i) = p.token_embedding.row(framed[i]) + p.position_embedding.row(i);
  Matrix h = layer_norm(x, p.emb_ln_gamma, p.emb_ln_beta, cache ? &cache->emb_ln : nullptr);
  Matrix emb_mask = dropout_mask(rng, cfg.dropout, len, d);
  if (emb_mask.size()) h = h.cwiseProduct(emb_mask);
  if (cache) {
    cache->framed = std::move(framed);
    cache->emb_mask = std::move(emb_mask);
    cache->layers.resize(p.layers.size());
  }

  const auto heads = static_cast<Eigen::Index>(cfg.heads);
  const Eigen::Index dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lp = p.layers[l];
    LayerCache local;
    LayerCache& lc = cache ? cache->layers[l] : local;
    Matrix q = h * lp.wq;
    add_bias(q, lp.bq);
    Matrix k = h * lp.wk;
    add_bias(k, lp.bk);
    Matrix v = h * lp.wv;
    add_bias(v, lp.bv);
    Matrix concat(len, d);
    lc.probs.resize(static_cast<std::size_t>(heads));
    for (Eigen::Index hd = 0; hd < heads; ++hd) {
      Matrix s = q.middleCols(hd * dk, dk) * k.middleCols(hd * dk, dk).transpose() * scale;
      softmax_rows(s);
      concat.middleCols(hd * dk, dk) = s * v.middleCols(hd * dk, dk);
      lc.probs[static_cast<std::size_t>(hd)] = std::move(s);
    }
    Matrix a = concat * lp.wo;
    add_bias(a, lp.bo);
    Matrix attn_mask = dropout_mask(rng, cfg.dropout, len, d);
    if (attn_mask.size()) a = a.cwiseProduct(attn_mask);
    Matrix h1 = layer_norm(h + a, lp.ln1_gamma, lp.ln1_beta, &lc.ln1);
    Matrix f1 = h1 * lp.w1;
    add_bias(f1, lp.b1);
    Matrix g = gelu(f1);
    Matrix f2 = g * lp.w2;
    add_bias(f2, lp.b2);
    Matrix ffn_mask = dropout_mask(rng, cfg.dropout, len, d);
    if (ffn_mask.size()) f2 = f2.cwiseProduct(ffn_mask);
    Matrix out = layer_norm(h1 + f2, lp.ln2_gamma, lp.ln2_beta, &lc.ln2);
    if (cache) {
      lc.input = std::move(h);
      lc.q = std::move(q);
      lc.k = std::move(k);
      lc.v = std::move(v);
      lc.concat = std::move(concat);
      lc.attn_mask = std::move(attn_mask);
      lc.h1 = std::move(h1);
      lc.f1 = std::move(f1);
      lc.g = std::move(g);
      lc.ffn_mask = std::move(ffn_mask);
    }
    h = std::move(out);
  }
  return h;
}

void encode_backward(const Parameters& p, const EncoderCache& c, Matrix dh, Parameters& grads) {
  const auto d = static_cast<Eigen::Index>(p.config.dim);
  const auto heads = static_cast<Eigen::Index>(p.config.heads);
  const Eigen::Index dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& lp = p.layers[li];
    auto& lg = grads.layers[li];
    const auto& lc = c.layers[li];

    Matrix dr2 = layer_norm_backward(dh, lp.ln2_gamma, lc.ln2, lg.ln2_gamma, lg.ln2_beta);
    Matrix dh1 = dr2;
    Matrix df2 = lc.ffn_mask.size() ? Matrix(dr2.cwiseProduct(lc.ffn_mask)) : dr2;
    lg.w2.noalias() += lc.g.transpose() * df2;
    lg.b2 += df2.colwise().sum();
    Matrix df1 = (df2 * lp.w2.transpose()).cwiseProduct(gelu_grad(lc.f1));
    lg.w1.noalias() += lc.h1.transpose() * df1;
    lg.b1 += df1.colwise().sum();
    dh1.noalias() += df1 * lp.w1.transpose();

    Matrix dr1 = layer_norm_backward(dh1, lp.ln1_gamma, lc.ln1, lg.ln1_gamma, lg.ln1_beta);
    Matrix din = dr1;
    Matrix da = lc.attn_mask.size() ? Matrix(dr1.cwiseProduct(lc.attn_mask)) : dr1;
    lg.wo.noalias() += lc.concat.transpose() * da;
    lg.bo += da.colwise().sum();
    Matrix dconcat = da * lp.wo.transpose();

    const Eigen::Index len = dconcat.rows();
    Matrix dq(len, d), dkm(len, d), dv(len, d);
    for (Eigen::Index hd = 0; hd < heads; ++hd) {
      const Matrix& probs = lc.probs[static_cast<std::size_t>(hd)];
      auto d_out = dconcat.middleCols(hd * dk, dk);
      Matrix dp = d_out * lc.v.middleCols(hd * dk, dk).transpose();
      dv.middleCols(hd * dk, dk) = probs.transpose() * d_out;
      Vector row_dot = (dp.array() * probs.array()).rowwise().sum();
      Matrix ds = (probs.array() * (dp.colwise() - row_dot).array()) * scale;
      dq.middleCols(hd * dk, dk) = ds * lc.k.middleCols(hd * dk, dk);
      dkm.middleCols(hd * dk, dk) = ds.transpose() * lc.q.middleCols(hd * dk, dk);
    }
    lg.wq.noalias() += lc.input.transpose() * dq;
    lg.bq += dq.colwise().sum();
    lg.wk.noalias() += lc.input.transpose() * dkm;
    lg.bk += dkm.colwise().sum();
    lg.wv.noalias() += lc.input.transpose() * dv;
    lg.bv += dv.colwise().sum();
    din.noalias() += dq * lp.wq.transpose();
    din.noalias() += dkm * lp.wk.transpose();
    din.noalias() += dv * lp.wv.transpose();
    dh = std::move(din);
  }

  if (c.emb_mask.size()) dh = dh.cwiseProduct(c.emb_mask);
  Matrix dx = layer_norm_backward(dh, p.emb_ln_gamma, c.emb_ln, grads.emb_ln_gamma, grads.emb_ln_beta);
  for (Eigen::Index i = 0; i < dx.rows(); ++i) {
    grads.token_embedding.row(c.framed[static_cast<std::size_t>(i)]) += dx.row(i);
    grads.position_embedding.row(i) += dx.row(i);
  }
}

// Masked-LM head on a gathered set of hidden rows. Returns logits.
struct MlmHeadCache {
  Matrix hidden;
  Matrix z;
  LayerNormCache ln;
  Matrix t;
};

Matrix mlm_logits(const Parameters& p, Matrix hidden, MlmHeadCache* cache) {
  Matrix z = hidden * p.mlm_w;
  add_bias(z, p.mlm_b);
  LayerNormCache ln;
  Matrix t = layer_norm(gelu(z), p.mlm_ln_gamma, p.mlm_ln_beta, &ln);
  Matrix logits = t * p.token_embedding.transpose();
  add_bias(logits, p.mlm_bias);
  if (cache) {
    cache->hidden = std::move(hidden);
    cache->z = std::move(z);
    cache->ln = std::move(ln);
    cache->t = std::move(t);
  }
  return logits;
}

Matrix mlm_backward(const Parameters& p, const MlmHeadCache& c, const Matrix& dlogits, Parameters& g) {
  g.mlm_bias += dlogits.colwise().sum();
  g.token_embedding.noalias() += dlogits.transpose() * c.t;
  Matrix dt = dlogits * p.token_embedding;
  Matrix dgz = layer_norm_backward(dt, p.mlm_ln_gamma, c.ln, g.mlm_ln_gamma, g.mlm_ln_beta);
  Matrix dz = dgz.cwiseProduct(gelu_grad(c.z));
  g.mlm_w.noalias() += c.hidden.transpose() * dz;
  g.mlm_b += dz.colwise().sum();
  return dz * p.mlm_w.transpose();
}

double weight_for(std::span<const double> weights, int label) {
  if (weights.empty()) return 1.0;
  if (label < 0 || static_cast<std::size_t>(label) >= weights.size())
    throw std::invalid_argument("label " + std::to_string(label) + " has no loss weight");
  return weights[static_cast<std::size_t>(label)];
}

// Adds w * -log softmax(logits)[label] to loss; fills dlogits with the
// gradient scaled by `norm`.
using RowRef = Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>>;
using ConstRowRef = Eigen::Ref<const Eigen::RowVectorXd, 0, Eigen::InnerStride<>>;

double weighted_ce_row(ConstRowRef logits, int label, double w, double norm, RowRef dlogits) {
  if (label < 0 || label >= logits.size()) throw std::invalid_argument("label out of range for head");
  const double mx = logits.maxCoeff();
  Eigen::RowVectorXd e = (logits.array() - mx).exp();
  const double sum = e.sum();
  const double loss = w * (std::log(sum) - (logits(label) - mx));
  dlogits = e / sum;
  dlogits(label) -= 1.0;
  dlogits *= w * norm;
  return loss;
}

std::vector<double> to_std(const Eigen::RowVectorXd& v) { return {v.data(), v.data() + v.size()}; }

void init_tensor(Matrix& m, std::size_t rows, std::size_t cols) {
  m = Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab_size <= kNumReserved) throw ConfigError("model: vocab_size must exceed the reserved tokens");
  if (dim == 0 || heads == 0 || hidden == 0 || num_classes < 2)
    throw ConfigError("model: dim, heads, hidden must be >= 1 and num_classes >= 2");
  if (dim % heads != 0)
    throw ConfigError("model: dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  if (max_positions < 3) throw ConfigError("model: max_positions must leave room for [CLS], [SEP] and one token");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
  if (!(init_std > 0.0)) throw ConfigError("model: init_std must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"dim", dim},         {"layers", layers},
          {"heads", heads},           {"hidden", hidden},   {"max_positions", max_positions},
          {"num_classes", num_classes}, {"dropout", dropout}, {"init_std", init_std},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.hidden = j.value("hidden", c.hidden);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.dropout = j.value("dropout", c.dropout);
  c.init_std = j.value("init_std", c.init_std);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<Parameters::Named> Parameters::tensors() {
  std::vector<Named> out = {
      {"token_embedding", &token_embedding},
      {"position_embedding", &position_embedding},
      {"emb_ln.gamma", &emb_ln_gamma},
      {"emb_ln.beta", &emb_ln_beta},
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& lp = layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    for (auto [name, t] : std::initializer_list<std::pair<const char*, Matrix*>>{
             {"attn.wq", &lp.wq}, {"attn.bq", &lp.bq}, {"attn.wk", &lp.wk}, {"attn.bk", &lp.bk},
             {"attn.wv", &lp.wv}, {"attn.bv", &lp.bv}, {"attn.wo", &lp.wo}, {"attn.bo", &lp.bo},
             {"ln1.gamma", &lp.ln1_gamma}, {"ln1.beta", &lp.ln1_beta}, {"ffn.w1", &lp.w1}, {"ffn.b1", &lp.b1},
             {"ffn.w2", &lp.w2}, {"ffn.b2", &lp.b2}, {"ln2.gamma", &lp.ln2_gamma}, {"ln2.beta", &lp.ln2_beta}})
      out.push_back({pre + name, t});
  }
  out.insert(out.end(), {{"cls.w", &cls_w},
                         {"cls.b", &cls_b},
                         {"tok.w", &tok_w},
                         {"tok.b", &tok_b},
                         {"mlm.transform.w", &mlm_w},
                         {"mlm.transform.b", &mlm_b},
                         {"mlm.ln.gamma", &mlm_ln_gamma},
                         {"mlm.ln.beta", &mlm_ln_beta},
                         {"mlm.bias", &mlm_bias}});
  return out;
}

std::vector<Parameters::ConstNamed> Parameters::tensors() const {
  std::vector<ConstNamed> out;
  for (auto& n : const_cast<Parameters*>(this)->tensors()) out.push_back({std::move(n.name), n.tensor});
  return out;
}

std::size_t Parameters::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += static_cast<std::size_t>(t.tensor->size());
  return n;
}

bool Parameters::all_finite() const {
  for (const auto& t : tensors())
    if (!t.tensor->allFinite()) return false;
  return true;
}

Parameters Parameters::zeros_like() const {
  Parameters z = *this;
  for (auto& t : z.tensors()) t.tensor->setZero();
  return z;
}

bool Parameters::operator==(const Parameters& other) const {
  if (!(config == other.config) || layers.size() != other.layers.size()) return false;
  auto a = tensors();
  auto b = other.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Matrix& x = *a[i].tensor;
    const Matrix& y = *b[i].tensor;
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (x.size() && std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) != 0)
      return false;
  }
  return true;
}

Parameters init_parameters(const ModelConfig& config) {
  config.validate();
  Parameters p;
  p.config = config;
  const std::size_t d = config.dim, h = config.hidden, v = config.vocab_size;
  init_tensor(p.token_embedding, v, d);
  init_tensor(p.position_embedding, config.max_positions, d);
  init_tensor(p.emb_ln_gamma, 1, d);
  init_tensor(p.emb_ln_beta, 1, d);
  p.layers.resize(config.layers);
  for (auto& lp : p.layers) {
    for (Matrix* w : {&lp.wq, &lp.wk, &lp.wv, &lp.wo}) init_tensor(*w, d, d);
    for (Matrix* b : {&lp.bq, &lp.bk, &lp.bv, &lp.bo, &lp.ln1_gamma, &lp.ln1_beta, &lp.b2, &lp.ln2_gamma, &lp.ln2_beta})
      init_tensor(*b, 1, d);
    init_tensor(lp.w1, d, h);
    init_tensor(lp.b1, 1, h);
    init_tensor(lp.w2, h, d);
  }
  init_tensor(p.cls_w, d, config.num_classes);
  init_tensor(p.cls_b, 1, config.num_classes);
  init_tensor(p.tok_w, d, 2);
  init_tensor(p.tok_b, 1, 2);
  init_tensor(p.mlm_w, d, d);
  init_tensor(p.mlm_b, 1, d);
  init_tensor(p.mlm_ln_gamma, 1, d);
  init_tensor(p.mlm_ln_beta, 1, d);
  init_tensor(p.mlm_bias, 1, v);

  Rng rng(config.seed);
  for (auto& t : p.tensors()) {
    const std::string& n = t.name;
    if (n.ends_with("gamma")) {
      t.tensor->setOnes();
    } else if (n.find(".b") != std::string::npos) {
      // biases and LayerNorm shifts stay zero
    } else {
      for (Eigen::Index i = 0; i < t.tensor->size(); ++i) t.tensor->data()[i] = rng.normal(0.0, config.init_std);
    }
  }
  return p;
}

void reset_classifier_head(Parameters& params, std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0xC1A55u}));
  for (Eigen::Index i = 0; i < params.cls_w.size(); ++i) params.cls_w.data()[i] = rng.normal(0.0, params.config.init_std);
  params.cls_b.setZero();
}

std::vector<double> seq_classify(const Parameters& params, std::span<const TokenId> ids) {
  Matrix h = encode(params, ids, nullptr, nullptr);
  Eigen::RowVectorXd logits = h.row(0) * params.cls_w + params.cls_b.row(0);
  logits.array() -= logits.maxCoeff();
  logits = logits.array().exp().matrix();
  logits /= logits.sum();
  return to_std(logits);
}

std::vector<double> token_classify(const Parameters& params, std::span<const TokenId> ids) {
  check_input(params, ids);
  if (ids.empty()) return {};
  Matrix h = encode(params, ids, nullptr, nullptr);
  Matrix logits = h.middleRows(1, static_cast<Eigen::Index>(ids.size())) * params.tok_w;
  add_bias(logits, params.tok_b);
  softmax_rows(logits);
  std::vector<double> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out[i] = logits(static_cast<Eigen::Index>(i), 1);
  return out;
}

std::vector<std::vector<double>> mlm_predict(const Parameters& params, std::span<const TokenId> ids,
                                             std::span<const std::size_t> positions) {
  if (positions.empty()) throw std::invalid_argument("mlm_predict: no masked positions");
  for (std::size_t pos : positions)
    if (pos >= ids.size()) throw std::invalid_argument("mlm_predict: position " + std::to_string(pos) + " out of range");
  Matrix h = encode(params, ids, nullptr, nullptr);
  Matrix gathered(static_cast<Eigen::Index>(positions.size()), h.cols());
  for (std::size_t i = 0; i < positions.size(); ++i)
    gathered.row(static_cast<Eigen::Index>(i)) = h.row(static_cast<Eigen::Index>(positions[i] + 1));
  Matrix logits = mlm_logits(params, std::move(gathered), nullptr);
  softmax_rows(logits);
  std::vector<std::vector<double>> out;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) out.push_back(to_std(logits.row(r)));
  return out;
}

std::string_view to_string(Head head) {
  switch (head) {
    case Head::kSequence: return "sequence";
    case Head::kToken: return "token";
    case Head::kMaskedLm: return "mlm";
  }
  return "?";
}

std::size_t Batch::size() const {
  return std::visit([](const auto& v) { return v.size(); }, examples);
}

double loss_and_gradient(const Parameters& params, const Batch& batch, std::span<const double> label_weights,
                         Parameters* grads, const std::uint64_t* dropout_seed) {
  const auto d = static_cast<Eigen::Index>(params.config.dim);
  auto example_rng = [&](std::size_t i) -> std::unique_ptr<Rng> {
    if (!dropout_seed) return nullptr;
    return std::make_unique<Rng>(derive_seed({*dropout_seed, i}));
  };
  double loss = 0.0;

  if (const auto* seqs = std::get_if<std::vector<SequenceExample>>(&batch.examples)) {
    if (seqs->empty()) return 0.0;
    const double norm = 1.0 / static_cast<double>(seqs->size());
    for (std::size_t i = 0; i < seqs->size(); ++i) {
      const auto& ex = (*seqs)[i];
      auto rng = example_rng(i);
      EncoderCache cache;
      Matrix h = encode(params, ex.ids, grads ? &cache : nullptr, rng.get());
      Eigen::RowVectorXd logits = h.row(0) * params.cls_w + params.cls_b.row(0);
      Eigen::RowVectorXd dlogits(logits.size());
      loss += weighted_ce_row(logits, ex.label, weight_for(label_weights, ex.label), norm, dlogits) * norm;
      if (grads) {
        grads->cls_w.noalias() += h.row(0).transpose() * dlogits;
        grads->cls_b += dlogits;
        Matrix dh = Matrix::Zero(h.rows(), d);
        dh.row(0) = dlogits * params.cls_w.transpose();
        encode_backward(params, cache, std::move(dh), *grads);
      }
    }
    return loss;
  }

  if (const auto* toks = std::get_if<std::vector<TokenExample>>(&batch.examples)) {
    std::size_t total = 0;
    for (const auto& ex : *toks) {
      if (ex.labels.size() != ex.ids.size()) throw std::invalid_argument("token labels not parallel to ids");
      total += ex.ids.size();
    }
    if (total == 0) return 0.0;
    const double norm = 1.0 / static_cast<double>(total);
    for (std::size_t i = 0; i < toks->size(); ++i) {
      const auto& ex = (*toks)[i];
      if (ex.ids.empty()) continue;
      auto rng = example_rng(i);
      EncoderCache cache;
      Matrix h = encode(params, ex.ids, grads ? &cache : nullptr, rng.get());
      const auto n = static_cast<Eigen::Index>(ex.ids.size());
      Matrix content = h.middleRows(1, n);
      Matrix logits = content * params.tok_w;
      add_bias(logits, params.tok_b);
      Matrix dlogits(n, 2);
      for (Eigen::Index r = 0; r < n; ++r) {
        const int y = ex.labels[static_cast<std::size_t>(r)];
        loss += weighted_ce_row(logits.row(r), y, weight_for(label_weights, y), norm, dlogits.row(r)) * norm;
      }
      if (grads) {
        grads->tok_w.noalias() += content.transpose() * dlogits;
        grads->tok_b += dlogits.colwise().sum();
        Matrix dh = Matrix::Zero(h.rows(), d);
        dh.middleRows(1, n) = dlogits * params.tok_w.transpose();
        encode_backward(params, cache, std::move(dh), *grads);
      }
    }
    return loss;
  }

  const auto& mlm = std::get<std::vector<MlmExample>>(batch.examples);
  std::size_t total = 0;
  for (const auto& ex : mlm) {
    if (ex.positions.size() != ex.targets.size()) throw std::invalid_argument("mlm targets not parallel to positions");
    total += ex.positions.size();
  }
  if (total == 0) return 0.0;
  const double norm = 1.0 / static_cast<double>(total);
  for (std::size_t i = 0; i < mlm.size(); ++i) {
    const auto& ex = mlm[i];
    if (ex.positions.empty()) continue;
    auto rng = example_rng(i);
    EncoderCache cache;
    Matrix h = encode(params, ex.input_ids, grads ? &cache : nullptr, rng.get());
    const auto m = static_cast<Eigen::Index>(ex.positions.size());
    Matrix gathered(m, d);
    for (Eigen::Index r = 0; r < m; ++r) {
      const std::size_t pos = ex.positions[static_cast<std::size_t>(r)];
      if (pos >= ex.input_ids.size()) throw std::invalid_argument("mlm position out of range");
      gathered.row(r) = h.row(static_cast<Eigen::Index>(pos + 1));
    }
    MlmHeadCache head;
    Matrix logits = mlm_logits(params, std::move(gathered), &head);
    Matrix dlogits(m, logits.cols());
    for (Eigen::Index r = 0; r < m; ++r)
      loss += weighted_ce_row(logits.row(r), ex.targets[static_cast<std::size_t>(r)], 1.0, norm, dlogits.row(r)) * norm;
    if (grads) {
      Matrix dgathered = mlm_backward(params, head, dlogits, *grads);
      Matrix dh = Matrix::Zero(h.rows(), d);
      for (Eigen::Index r = 0; r < m; ++r)
        dh.row(static_cast<Eigen::Index>(ex.positions[static_cast<std::size_t>(r)] + 1)) += dgathered.row(r);
      encode_backward(params, cache, std::move(dh), *grads);
    }
  }
  return loss;
}

}  // namespace selmask
