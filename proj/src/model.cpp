#include "imitmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "imitmt/hash.hpp"

namespace imitmt {

using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// Params

std::vector<std::pair<std::string, Mat*>> Params::tensors() {
  std::vector<std::pair<std::string, Mat*>> out;
  out.emplace_back("embedding", &embedding);
  for (size_t l = 0; l < encoder.size(); ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    out.emplace_back(p + "wx", &encoder[l].wx);
    out.emplace_back(p + "wh_zr", &encoder[l].wh_zr);
    out.emplace_back(p + "wh_g", &encoder[l].wh_g);
    out.emplace_back(p + "b", &encoder[l].b);
  }
  for (size_t l = 0; l < decoder.size(); ++l) {
    const std::string p = "dec." + std::to_string(l) + ".";
    out.emplace_back(p + "wx", &decoder[l].wx);
    out.emplace_back(p + "wh_zr", &decoder[l].wh_zr);
    out.emplace_back(p + "wh_g", &decoder[l].wh_g);
    out.emplace_back(p + "b", &decoder[l].b);
  }
  out.emplace_back("combine.w", &combine_w);
  out.emplace_back("combine.b", &combine_b);
  out.emplace_back("out.w", &out_w);
  out.emplace_back("out.b", &out_b);
  return out;
}

std::vector<std::pair<std::string, const Mat*>> Params::tensors() const {
  auto mut = const_cast<Params*>(this)->tensors();
  std::vector<std::pair<std::string, const Mat*>> out;
  out.reserve(mut.size());
  for (auto& [n, m] : mut) out.emplace_back(n, m);
  return out;
}

void Params::setZero() {
  for (auto& [n, m] : tensors()) m->setZero();
}

Params Params::zeros_like(const Params& shape) {
  Params g = shape;
  g.setZero();
  return g;
}

// ---------------------------------------------------------------------------
// Model lifecycle

Model Model::init(const ModelConfig& cfg, const Tokenizer& tok) {
  if (cfg.embed_dim < 1 || cfg.hidden_dim < 1 || cfg.num_layers < 1)
    throw std::runtime_error("init_model: dimensions must be >= 1");
  if (cfg.dropout < 0 || cfg.dropout >= 1)
    throw std::runtime_error("init_model: dropout must be in [0, 1)");
  const int v = tok.vocab_size();
  if (v < 5) throw std::runtime_error("init_model: vocabulary too small");

  Model m;
  m.cfg_ = cfg;
  m.tok_ = &tok;
  m.tok_hash_ = tok.hash();
  m.vocab_ = v;

  const int e = cfg.embed_dim, h = cfg.hidden_dim;
  m.p_.embedding.resize(v, e);
  m.p_.encoder.resize(cfg.num_layers);
  m.p_.decoder.resize(cfg.num_layers);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const int enc_in = l == 0 ? e : h;
    // Decoder layer 0 consumes [token embedding, previous attention context].
    const int dec_in = l == 0 ? e + e : h;
    m.p_.encoder[l].wx.resize(enc_in, 3 * h);
    m.p_.decoder[l].wx.resize(dec_in, 3 * h);
    for (GruLayer* g : {&m.p_.encoder[l], &m.p_.decoder[l]}) {
      g->wh_zr.resize(h, 2 * h);
      g->wh_g.resize(h, h);
      g->b.resize(1, 3 * h);
    }
  }
  // Attention keys are encoder states, values the source-position embeddings;
  // the output combines the decoder state with the attended embedding.
  m.p_.combine_w.resize(h + e, e);
  m.p_.combine_b.resize(1, e);
  m.p_.out_w.resize(e, v);
  m.p_.out_b.resize(1, v);

  Rng rng(derive_seed(cfg.seed, "init"));
  for (auto& [name, t] : m.p_.tensors()) {
    // Output head starts at zero so an untrained model emits the uniform
    // distribution; biases start at zero as usual.
    if (name == "out.w" || name == "out.b" || name.ends_with(".b") || name == "combine.b") {
      t->setZero();
      continue;
    }
    // Embeddings scale with their dimension, weight matrices with fan-in.
    const Scalar scale = name == "embedding"
                             ? 1.0 / std::sqrt(static_cast<Scalar>(t->cols()))
                             : 1.0 / std::sqrt(static_cast<Scalar>(t->rows()));
    for (Eigen::Index r = 0; r < t->rows(); ++r)
      for (Eigen::Index c = 0; c < t->cols(); ++c) (*t)(r, c) = rng.normal() * scale;
    // Pass the attended source embedding straight through to the output at
    // init; the head can read the aligned word from step one.
    if (name == "combine.w")
      t->bottomRows(e) += Mat::Identity(e, e);
  }
  return m;
}

Model Model::fork_learner() const {
  Model m = *this;
  m.role_ = Role::Learner;
  return m;
}

Params& Model::mutable_params() {
  if (role_ == Role::Expert)
    throw std::runtime_error("expert model is immutable: parameter mutation rejected");
  return p_;
}

namespace {

void append_f32(std::string& out, const Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const float f = static_cast<float>(m(r, c));
      char buf[4];
      std::memcpy(buf, &f, 4);
      out.append(buf, 4);
    }
}

}  // namespace

std::string Model::param_hash() const {
  Sha256 h;
  for (auto& [name, t] : p_.tensors()) {
    std::string bytes;
    bytes.reserve(static_cast<size_t>(t->size()) * 4);
    append_f32(bytes, *t);
    h.update(bytes);
  }
  return h.hex_digest();
}

namespace {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

constexpr char kMagic[8] = {'I', 'M', 'I', 'T', 'M', 'T', '0', '1'};

}  // namespace

void Model::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write(kMagic, 8);
  write_pod<uint32_t>(os, 1);  // version
  write_pod<uint8_t>(os, role_ == Role::Expert ? 1 : 0);
  write_pod<int32_t>(os, cfg_.embed_dim);
  write_pod<int32_t>(os, cfg_.hidden_dim);
  write_pod<int32_t>(os, cfg_.num_layers);
  write_pod<float>(os, static_cast<float>(cfg_.dropout));
  write_pod<int32_t>(os, cfg_.max_decode_len);
  write_pod<uint64_t>(os, cfg_.seed);
  write_pod<int32_t>(os, vocab_);
  os.write(tok_hash_.data(), 64);
  auto ts = p_.tensors();
  write_pod<uint32_t>(os, static_cast<uint32_t>(ts.size()));
  for (auto& [name, t] : ts) {
    write_pod<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint32_t>(os, static_cast<uint32_t>(t->rows()));
    write_pod<uint32_t>(os, static_cast<uint32_t>(t->cols()));
    std::string bytes;
    append_f32(bytes, *t);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

Model Model::load(const std::string& path, const Tokenizer& tok) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  if (read_pod<uint32_t>(is) != 1) throw std::runtime_error("checkpoint: unsupported version");
  const uint8_t role = read_pod<uint8_t>(is);
  ModelConfig cfg;
  cfg.embed_dim = read_pod<int32_t>(is);
  cfg.hidden_dim = read_pod<int32_t>(is);
  cfg.num_layers = read_pod<int32_t>(is);
  cfg.dropout = read_pod<float>(is);
  cfg.max_decode_len = read_pod<int32_t>(is);
  cfg.seed = read_pod<uint64_t>(is);
  const int vocab = read_pod<int32_t>(is);
  std::string hash(64, '\0');
  is.read(hash.data(), 64);
  if (tok.hash() != hash)
    throw std::runtime_error("checkpoint: tokenizer hash mismatch for " + path);
  if (tok.vocab_size() != vocab)
    throw std::runtime_error("checkpoint: vocabulary size mismatch for " + path);

  Model m = Model::init(cfg, tok);
  const uint32_t count = read_pod<uint32_t>(is);
  auto ts = m.p_.tensors();
  if (count != ts.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  for (auto& [name, t] : ts) {
    const uint16_t len = read_pod<uint16_t>(is);
    std::string fname(len, '\0');
    is.read(fname.data(), len);
    if (fname != name) throw std::runtime_error("checkpoint: tensor order mismatch at " + fname);
    const auto rows = static_cast<Eigen::Index>(read_pod<uint32_t>(is));
    const auto cols = static_cast<Eigen::Index>(read_pod<uint32_t>(is));
    if (rows != t->rows() || cols != t->cols())
      throw std::runtime_error("checkpoint: shape mismatch at " + fname);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) (*t)(r, c) = read_pod<float>(is);
  }
  m.role_ = role == 1 ? Role::Expert : Role::Learner;
  return m;
}

// ---------------------------------------------------------------------------
// Batched forward/backward

namespace {

inline Mat sigmoid(const Mat& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

struct LayerCache {
  std::vector<Mat> x, z, r, g, rh, h;  // indexed by timestep
};

struct GruGrads {
  Mat dx;
  Mat dh_prev;
};

// One batched GRU step; caches activations for the backward pass.
void gru_forward(const GruLayer& w, const Mat& x, const Mat& h_prev, int hdim, LayerCache& cache,
                 int t) {
  Mat ax;
  ax.noalias() = x * w.wx;
  Mat azr;
  azr.noalias() = h_prev * w.wh_zr;
  Mat z = sigmoid(ax.leftCols(hdim) + azr.leftCols(hdim) +
                  w.b.leftCols(hdim).replicate(x.rows(), 1));
  Mat r = sigmoid(ax.middleCols(hdim, hdim) + azr.middleCols(hdim, hdim) +
                  w.b.middleCols(hdim, hdim).replicate(x.rows(), 1));
  Mat rh = r.cwiseProduct(h_prev);
  Mat ag;
  ag.noalias() = rh * w.wh_g;
  Mat g = (ax.rightCols(hdim) + ag + w.b.rightCols(hdim).replicate(x.rows(), 1))
              .array()
              .tanh()
              .matrix();
  Mat h = (1.0 - z.array()).matrix().cwiseProduct(h_prev) + z.cwiseProduct(g);
  cache.x[t] = x;
  cache.z[t] = std::move(z);
  cache.r[t] = std::move(r);
  cache.g[t] = std::move(g);
  cache.rh[t] = std::move(rh);
  cache.h[t] = std::move(h);
}

GruGrads gru_backward(const GruLayer& w, GruLayer& gw, const LayerCache& cache, int t,
                      const Mat& h_init, const Mat& dh) {
  const Mat& x = cache.x[t];
  const Mat& z = cache.z[t];
  const Mat& r = cache.r[t];
  const Mat& g = cache.g[t];
  const Mat& rh = cache.rh[t];
  const Mat& h_prev = t > 0 ? cache.h[t - 1] : h_init;
  const int hdim = static_cast<int>(z.cols());

  Mat dg = dh.cwiseProduct(z);
  Mat dz = dh.cwiseProduct(g - h_prev);
  Mat dh_prev = dh.cwiseProduct((1.0 - z.array()).matrix());
  Mat dag = dg.cwiseProduct((1.0 - g.array().square()).matrix());
  Mat drh;
  drh.noalias() = dag * w.wh_g.transpose();
  gw.wh_g.noalias() += rh.transpose() * dag;
  Mat dr = drh.cwiseProduct(h_prev);
  dh_prev += drh.cwiseProduct(r);
  Mat daz = dz.cwiseProduct(z).cwiseProduct((1.0 - z.array()).matrix());
  Mat dar = dr.cwiseProduct(r).cwiseProduct((1.0 - r.array()).matrix());
  Mat dazr(daz.rows(), 2 * hdim);
  dazr.leftCols(hdim) = daz;
  dazr.rightCols(hdim) = dar;
  gw.wh_zr.noalias() += h_prev.transpose() * dazr;
  dh_prev.noalias() += dazr * w.wh_zr.transpose();
  Mat dax(daz.rows(), 3 * hdim);
  dax.leftCols(hdim) = daz;
  dax.middleCols(hdim, hdim) = dar;
  dax.rightCols(hdim) = dag;
  gw.wx.noalias() += x.transpose() * dax;
  gw.b.noalias() += dax.colwise().sum();
  GruGrads out;
  out.dx.noalias() = dax * w.wx.transpose();
  out.dh_prev = std::move(dh_prev);
  return out;
}

struct BatchRunStats {
  Scalar sum_nll = 0;
  long tokens = 0;
};

// Teacher-forced forward (and optional backward) over a padded batch.
// grad_scale multiplies every pair's gradient contribution; the returned
// sum_nll is unscaled. Dropout masks are drawn from dropout_rng when the
// config's dropout is positive.
BatchRunStats run_batch(const Params& p, const ModelConfig& cfg, int vocab,
                        const std::vector<EncodedPair>& pairs, Scalar grad_scale, Params* grads,
                        Rng* dropout_rng) {
  const int B = static_cast<int>(pairs.size());
  if (B == 0) return {};
  const int E = cfg.embed_dim, H = cfg.hidden_dim, L = cfg.num_layers;

  int S = 0, T = 0;
  for (const auto& pr : pairs) {
    if (pr.src.size() < 1 || pr.tgt.size() < 2)
      throw std::runtime_error("run_batch: malformed encoded pair");
    if (static_cast<int>(pr.src.size()) > cfg.max_decode_len ||
        static_cast<int>(pr.tgt.size()) > cfg.max_decode_len)
      throw std::runtime_error("sequence exceeds max_decode_len");
    S = std::max(S, static_cast<int>(pr.src.size()));
    T = std::max(T, static_cast<int>(pr.tgt.size()));
  }
  const int Td = T - 1;  // decoder steps

  std::vector<int> src_len(B), tgt_steps(B);
  for (int i = 0; i < B; ++i) {
    src_len[i] = static_cast<int>(pairs[i].src.size());
    tgt_steps[i] = static_cast<int>(pairs[i].tgt.size()) - 1;
  }

  const bool use_dropout = cfg.dropout > 0 && dropout_rng != nullptr;
  const Scalar keep = 1.0 - cfg.dropout;
  auto draw_mask = [&](int rows, int cols) {
    Mat m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        m(r, c) = dropout_rng->uniform_real() < keep ? 1.0 / keep : 0.0;
    return m;
  };
  std::vector<Mat> enc_mask, dec_mask, out_mask;
  if (use_dropout) {
    enc_mask.reserve(S);
    for (int t = 0; t < S; ++t) enc_mask.push_back(draw_mask(B, E));
    dec_mask.reserve(Td);
    for (int t = 0; t < Td; ++t) dec_mask.push_back(draw_mask(B, E));
    out_mask.reserve(Td);
    for (int t = 0; t < Td; ++t) out_mask.push_back(draw_mask(B, E));
  }

  // ----- encoder forward
  std::vector<LayerCache> enc(L);
  for (int l = 0; l < L; ++l) {
    enc[l].x.resize(S);
    enc[l].z.resize(S);
    enc[l].r.resize(S);
    enc[l].g.resize(S);
    enc[l].rh.resize(S);
    enc[l].h.resize(S);
  }
  const Mat h0 = Mat::Zero(B, H);
  for (int t = 0; t < S; ++t) {
    Mat x(B, E);
    for (int i = 0; i < B; ++i) {
      const int id = t < src_len[i] ? pairs[i].src.ids[t] : Tokenizer::kPad;
      x.row(i) = p.embedding.row(id);
    }
    if (use_dropout) x = x.cwiseProduct(enc_mask[t]);
    for (int l = 0; l < L; ++l) {
      const Mat& h_prev = t > 0 ? enc[l].h[t - 1] : h0;
      gru_forward(p.encoder[l], x, h_prev, H, enc[l], t);
      x = enc[l].h[t];
    }
  }

  // Per-item attention keys (encoder top states), values (source-position
  // embeddings as fed to the encoder) and per-layer final states.
  std::vector<Mat> enc_top(B), enc_val(B);
  std::vector<Mat> enc_final(L, Mat::Zero(B, H));
  for (int i = 0; i < B; ++i) {
    enc_top[i].resize(src_len[i], H);
    enc_val[i].resize(src_len[i], E);
    for (int t = 0; t < src_len[i]; ++t) {
      enc_top[i].row(t) = enc[L - 1].h[t].row(i);
      enc_val[i].row(t) = enc[0].x[t].row(i);
    }
    for (int l = 0; l < L; ++l) enc_final[l].row(i) = enc[l].h[src_len[i] - 1].row(i);
  }

  // ----- decoder forward
  std::vector<LayerCache> dec(L);
  for (int l = 0; l < L; ++l) {
    dec[l].x.resize(Td);
    dec[l].z.resize(Td);
    dec[l].r.resize(Td);
    dec[l].g.resize(Td);
    dec[l].rh.resize(Td);
    dec[l].h.resize(Td);
  }
  std::vector<std::vector<Vec>> alphas(Td, std::vector<Vec>(B));
  std::vector<Mat> ctxs(Td), combos_u(Td), o_tanh(Td), o_used(Td), probs(Td);

  BatchRunStats stats;
  for (int t = 0; t < Td; ++t) {
    // Input feeding: [token embedding, previous attention context].
    Mat x(B, E + E);
    for (int i = 0; i < B; ++i) {
      const int id = t < tgt_steps[i] ? pairs[i].tgt.ids[t] : Tokenizer::kPad;
      x.row(i).head(E) = p.embedding.row(id);
    }
    if (use_dropout) x.leftCols(E) = x.leftCols(E).cwiseProduct(dec_mask[t]);
    if (t > 0)
      x.rightCols(E) = ctxs[t - 1];
    else
      x.rightCols(E).setZero();
    for (int l = 0; l < L; ++l) {
      const Mat& h_prev = t > 0 ? dec[l].h[t - 1] : enc_final[l];
      gru_forward(p.decoder[l], x, h_prev, H, dec[l], t);
      x = dec[l].h[t];
    }
    const Mat& htop = dec[L - 1].h[t];

    const Scalar att_scale = 1.0;  // probe: unscaled
    Mat c = Mat::Zero(B, E);
    for (int i = 0; i < B; ++i) {
      Vec scores = att_scale * (enc_top[i] * htop.row(i).transpose());
      const Scalar mx = scores.maxCoeff();
      Vec a = (scores.array() - mx).exp().matrix();
      a /= a.sum();
      alphas[t][i] = a;
      c.row(i) = (enc_val[i].transpose() * a).transpose();
    }
    ctxs[t] = c;

    Mat u(B, H + E);
    u.leftCols(H) = htop;
    u.rightCols(E) = c;
    combos_u[t] = u;
    Mat o = (u * p.combine_w + p.combine_b.replicate(B, 1)).array().tanh().matrix();
    o_tanh[t] = o;
    Mat ou = use_dropout ? o.cwiseProduct(out_mask[t]).eval() : o;
    o_used[t] = ou;
    Mat logits;
    logits.noalias() = ou * p.out_w;
    logits += p.out_b.replicate(B, 1);

    Mat pmat(B, vocab);
    for (int i = 0; i < B; ++i) {
      const Scalar mx = logits.row(i).maxCoeff();
      RowVec ex = (logits.row(i).array() - mx).exp().matrix();
      const Scalar z = ex.sum();
      pmat.row(i) = ex / z;
      if (t < tgt_steps[i]) {
        const int label = pairs[i].tgt.ids[t + 1];
        stats.sum_nll += mx + std::log(z) - logits(i, label);
        stats.tokens += 1;
      }
    }
    probs[t] = std::move(pmat);
  }

  if (grads == nullptr) return stats;
  Params& g = *grads;

  // ----- decoder backward
  std::vector<Mat> dh(L, Mat::Zero(B, H));
  std::vector<Mat> d_enc_top(B), d_enc_val(B);
  for (int i = 0; i < B; ++i) {
    d_enc_top[i] = Mat::Zero(src_len[i], H);
    d_enc_val[i] = Mat::Zero(src_len[i], E);
  }
  Mat dc_carry = Mat::Zero(B, E);  // gradient into c_{t-1} via input feeding

  for (int t = Td - 1; t >= 0; --t) {
    Mat dlogits = Mat::Zero(B, vocab);
    for (int i = 0; i < B; ++i) {
      if (t >= tgt_steps[i]) continue;
      dlogits.row(i) = probs[t].row(i) * grad_scale;
      dlogits(i, pairs[i].tgt.ids[t + 1]) -= grad_scale;
    }
    g.out_b.noalias() += dlogits.colwise().sum();
    g.out_w.noalias() += o_used[t].transpose() * dlogits;
    Mat dou;
    dou.noalias() = dlogits * p.out_w.transpose();
    Mat do_tanh = use_dropout ? dou.cwiseProduct(out_mask[t]).eval() : dou;
    Mat dao = do_tanh.cwiseProduct((1.0 - o_tanh[t].array().square()).matrix());
    g.combine_b.noalias() += dao.colwise().sum();
    g.combine_w.noalias() += combos_u[t].transpose() * dao;
    Mat du;
    du.noalias() = dao * p.combine_w.transpose();
    Mat dhtop = du.leftCols(H);
    Mat dc = du.rightCols(E) + dc_carry;  // combine output + next step's input feed

    const Scalar att_scale = 1.0;  // probe: unscaled
    const Mat& htop = dec[L - 1].h[t];
    for (int i = 0; i < B; ++i) {
      const Vec& a = alphas[t][i];
      Vec dalpha = enc_val[i] * dc.row(i).transpose();
      const Scalar dot = a.dot(dalpha);
      Vec ds = att_scale * a.cwiseProduct(dalpha - Vec::Constant(a.size(), dot));
      dhtop.row(i) += (enc_top[i].transpose() * ds).transpose();
      d_enc_top[i].noalias() += ds * htop.row(i);
      d_enc_val[i].noalias() += a * dc.row(i);
    }

    dh[L - 1] += dhtop;
    for (int l = L - 1; l >= 0; --l) {
      const Mat& h_init = enc_final[l];
      GruGrads gg = gru_backward(p.decoder[l], g.decoder[l], dec[l], t, h_init, dh[l]);
      dh[l] = std::move(gg.dh_prev);
      if (l > 0) {
        dh[l - 1] += gg.dx;
      } else {
        Mat demb = gg.dx.leftCols(E);
        if (use_dropout) demb = demb.cwiseProduct(dec_mask[t]);
        for (int i = 0; i < B; ++i)
          if (t < tgt_steps[i]) g.embedding.row(pairs[i].tgt.ids[t]) += demb.row(i);
        dc_carry = gg.dx.rightCols(E);  // flows into c_{t-1}
      }
    }
  }
  // Remaining dh is the gradient wrt the decoder initial state, i.e. the
  // per-layer encoder final states.
  std::vector<Mat> d_enc_final = dh;

  // ----- encoder backward
  std::vector<Mat> dhe(L, Mat::Zero(B, H));
  for (int t = S - 1; t >= 0; --t) {
    for (int i = 0; i < B; ++i) {
      if (t < src_len[i]) dhe[L - 1].row(i) += d_enc_top[i].row(t);
      if (t == src_len[i] - 1)
        for (int l = 0; l < L; ++l) dhe[l].row(i) += d_enc_final[l].row(i);
    }
    for (int l = L - 1; l >= 0; --l) {
      GruGrads gg = gru_backward(p.encoder[l], g.encoder[l], enc[l], t, h0, dhe[l]);
      dhe[l] = std::move(gg.dh_prev);
      if (l > 0) {
        dhe[l - 1] += gg.dx;
      } else {
        // Layer-0 inputs also serve as attention values.
        Mat dx = gg.dx;
        for (int i = 0; i < B; ++i)
          if (t < src_len[i]) dx.row(i) += d_enc_val[i].row(t);
        if (use_dropout) dx = dx.cwiseProduct(enc_mask[t]);
        for (int i = 0; i < B; ++i)
          if (t < src_len[i]) g.embedding.row(pairs[i].src.ids[t]) += dx.row(i);
      }
    }
  }
  return stats;
}

}  // namespace

Scalar Model::nll_loss(const TokenSequence& src, const TokenSequence& tgt) const {
  std::vector<EncodedPair> one{{src, tgt}};
  return run_batch(p_, cfg_, vocab_, one, 1.0, nullptr, nullptr).sum_nll;
}

Params Model::nll_gradient(const TokenSequence& src, const TokenSequence& tgt,
                           Scalar* loss_out) const {
  Params g = Params::zeros_like(p_);
  std::vector<EncodedPair> one{{src, tgt}};
  auto stats = run_batch(p_, cfg_, vocab_, one, 1.0, &g, nullptr);
  if (loss_out != nullptr) *loss_out = stats.sum_nll;
  return g;
}

// ---------------------------------------------------------------------------
// Adam

void AdamState::apply(Params& params, const Params& grads, Scalar lr) {
  constexpr Scalar b1 = 0.9, b2 = 0.999, eps = 1e-8;
  auto ps = params.tensors();
  auto gs = grads.tensors();
  if (m_.empty()) {
    for (auto& [n, t] : ps) {
      m_.push_back(Mat::Zero(t->rows(), t->cols()));
      v_.push_back(Mat::Zero(t->rows(), t->cols()));
    }
  }
  ++t_;
  const Scalar c1 = 1.0 - std::pow(b1, static_cast<Scalar>(t_));
  const Scalar c2 = 1.0 - std::pow(b2, static_cast<Scalar>(t_));
  for (size_t i = 0; i < ps.size(); ++i) {
    const Mat& g = *gs[i].second;
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    ps[i].second->array() -=
        lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// Train steps

GroupLossReport weighted_train_step(Model& m, AdamState& opt, const std::vector<LossGroup>& groups,
                                    Scalar lr, Rng* dropout_rng) {
  Params& params = m.mutable_params();  // rejects expert role up front
  Params grads = Params::zeros_like(params);
  GroupLossReport rep;
  for (const LossGroup& grp : groups) {
    long tokens = 0;
    for (const auto& pr : *grp.pairs) tokens += static_cast<long>(pr.tgt.size()) - 1;
    if (tokens == 0) {
      rep.group_mean.push_back(0);
      rep.group_tokens.push_back(0);
      continue;
    }
    const Scalar scale = grp.weight / static_cast<Scalar>(tokens);
    auto stats = run_batch(params, m.config(), m.vocab_size(), *grp.pairs, scale, &grads,
                           dropout_rng);
    const Scalar mean = stats.sum_nll / static_cast<Scalar>(stats.tokens);
    rep.group_mean.push_back(mean);
    rep.group_tokens.push_back(stats.tokens);
    rep.total += grp.weight * mean;
    rep.tokens += stats.tokens;
  }
  if (!std::isfinite(rep.total))
    throw std::runtime_error("train_step: non-finite loss " + std::to_string(rep.total) +
                             "; parameters unchanged");
  Scalar sq = 0;
  for (auto& [n, t] : grads.tensors()) sq += t->squaredNorm();
  rep.grad_norm = std::sqrt(sq);
  opt.apply(params, grads, lr);
  return rep;
}

TrainStepReport train_step(Model& m, AdamState& opt, const std::vector<EncodedPair>& batch,
                           Scalar lr, Rng* dropout_rng) {
  if (batch.empty()) throw std::runtime_error("train_step: empty batch");
  std::vector<LossGroup> groups{{&batch, 1.0}};
  GroupLossReport rep = weighted_train_step(m, opt, groups, lr, dropout_rng);
  return {rep.total, rep.grad_norm, rep.tokens};
}

Scalar batch_mean_nll(const Model& m, const std::vector<EncodedPair>& batch) {
  Scalar sum = 0;
  long tokens = 0;
  for (const auto& pr : batch) {
    sum += m.nll_loss(pr.src, pr.tgt);
    tokens += static_cast<long>(pr.tgt.size()) - 1;
  }
  return tokens > 0 ? sum / static_cast<Scalar>(tokens) : 0.0;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

// Row-wise decoder step used by beam search. Works on one hypothesis at a
// time so results are identical whether items are decoded alone or batched.
struct RowState {
  std::vector<RowVec> h;  // per layer
  RowVec c;               // previous attention context (input feeding)
};

// Preallocated scratch for the row decoder; sized once per search.
struct RowWork {
  RowVec x, ax, azr, z, r, rh, g, c, u, o, logits, logprobs;
  Vec scores, alpha;

  RowWork(const ModelConfig& cfg, int vocab, int max_src) {
    const int H = cfg.hidden_dim, E = cfg.embed_dim;
    x.resize(std::max(E + E, H));
    ax.resize(3 * H);
    azr.resize(2 * H);
    z.resize(H);
    r.resize(H);
    rh.resize(H);
    g.resize(H);
    c.resize(E);
    u.resize(H + E);
    o.resize(E);
    logits.resize(vocab);
    logprobs.resize(vocab);
    scores.resize(max_src);
    alpha.resize(max_src);
  }
};

const RowVec& decode_step_row(const Params& p, const ModelConfig& cfg, RowState& st, int input_id,
                              const Mat& enc_top, const Mat& enc_val, RowWork& w) {
  const int H = cfg.hidden_dim, L = cfg.num_layers;
  const int E = cfg.embed_dim;
  int in_dim = E + E;
  w.x.head(E) = p.embedding.row(input_id);
  w.x.segment(E, E) = st.c;
  for (int l = 0; l < L; ++l) {
    const GruLayer& wl = p.decoder[l];
    w.ax.noalias() = w.x.head(in_dim) * wl.wx;
    w.azr.noalias() = st.h[l] * wl.wh_zr;
    w.z = (1.0 / (1.0 + (-(w.ax.head(H) + w.azr.head(H) + wl.b.leftCols(H))).array().exp()))
              .matrix();
    w.r = (1.0 /
           (1.0 +
            (-(w.ax.segment(H, H) + w.azr.segment(H, H) + wl.b.middleCols(H, H))).array().exp()))
              .matrix();
    w.rh = w.r.cwiseProduct(st.h[l]);
    w.g.noalias() = w.rh * wl.wh_g;
    w.g = (w.ax.segment(2 * H, H) + w.g + wl.b.rightCols(H)).array().tanh().matrix();
    st.h[l] = (1.0 - w.z.array()).matrix().cwiseProduct(st.h[l]) + w.z.cwiseProduct(w.g);
    w.x.head(H) = st.h[l];
    in_dim = H;
  }
  const RowVec& htop = st.h[L - 1];
  const auto len = enc_top.rows();
  w.scores.head(len).noalias() = enc_top * htop.transpose();
  w.scores.head(len) *= 1.0;  // probe: unscaled
  const Scalar mx = w.scores.head(len).maxCoeff();
  w.alpha.head(len) = (w.scores.head(len).array() - mx).exp().matrix();
  w.alpha.head(len) /= w.alpha.head(len).sum();
  w.c.noalias() = (enc_val.transpose() * w.alpha.head(len)).transpose();
  st.c = w.c;  // carried into the next step's input
  w.u.head(H) = htop;
  w.u.tail(E) = w.c;
  w.o.noalias() = w.u * p.combine_w;
  w.o = (w.o + p.combine_b).array().tanh().matrix();
  w.logits.noalias() = w.o * p.out_w;
  w.logits += p.out_b;
  const Scalar lmx = w.logits.maxCoeff();
  const Scalar lz = lmx + std::log((w.logits.array() - lmx).exp().sum());
  w.logprobs = (w.logits.array() - lz).matrix();
  return w.logprobs;
}

// Per-item source encoding for generation: batched machinery at batch size
// one, so beam_search and beam_search_batch agree bit for bit.
struct SourceEncoding {
  Mat top;                          // keys: len x H
  Mat values;                       // len x E source embeddings
  std::vector<RowVec> final_state;  // per layer
};

SourceEncoding encode_source_for_decode(const Params& p, const ModelConfig& cfg,
                                        const TokenSequence& src) {
  const int H = cfg.hidden_dim, L = cfg.num_layers;
  const int S = static_cast<int>(src.size());
  SourceEncoding out;
  out.top.resize(S, H);
  out.values.resize(S, cfg.embed_dim);
  for (int t = 0; t < S; ++t) out.values.row(t) = p.embedding.row(src.ids[t]);
  std::vector<RowVec> h(L, RowVec::Zero(H));
  for (int t = 0; t < S; ++t) {
    RowVec x = p.embedding.row(src.ids[t]);
    for (int l = 0; l < L; ++l) {
      const GruLayer& w = p.encoder[l];
      RowVec ax = x * w.wx;
      RowVec azr = h[l] * w.wh_zr;
      RowVec z =
          (1.0 / (1.0 + (-(ax.leftCols(H) + azr.leftCols(H) + w.b.leftCols(H))).array().exp()))
              .matrix();
      RowVec r = (1.0 / (1.0 + (-(ax.middleCols(H, H) + azr.middleCols(H, H) +
                                  w.b.middleCols(H, H)))
                                   .array()
                                   .exp()))
                     .matrix();
      RowVec rh = r.cwiseProduct(h[l]);
      RowVec g = (ax.rightCols(H) + rh * w.wh_g + w.b.rightCols(H)).array().tanh().matrix();
      h[l] = (1.0 - z.array()).matrix().cwiseProduct(h[l]) + z.cwiseProduct(g);
      x = h[l];
    }
    out.top.row(t) = h[L - 1];
  }
  out.final_state = std::move(h);
  return out;
}

struct BeamHyp {
  std::vector<int> toks;
  Scalar cum = 0;
  bool greedy_lane = false;
  RowState state;
};

struct DoneHyp {
  Scalar norm = -std::numeric_limits<Scalar>::infinity();
  std::vector<int> toks;
};

bool done_better(const DoneHyp& a, const DoneHyp& b) {
  if (a.norm != b.norm) return a.norm > b.norm;
  return a.toks < b.toks;
}

}  // namespace

std::vector<TokenSequence> beam_search_batch(const Model& m,
                                             const std::vector<TokenSequence>& srcs,
                                             const LanguageTag& tgt_lang, int beam, int max_len) {
  if (beam < 1) throw std::runtime_error("beam_search: beam must be >= 1");
  const Params& p = m.params();
  const ModelConfig& cfg = m.config();
  const int vocab = m.vocab_size();
  const int eos = Tokenizer::kEos;
  const int tgt_tag = m.tokenizer().tag_id(tgt_lang);
  const int B = static_cast<int>(srcs.size());

  std::vector<SourceEncoding> enc(B);
  std::vector<std::vector<BeamHyp>> actives(B);
  std::vector<std::vector<DoneHyp>> done(B);
  int max_src = 1;
  for (int i = 0; i < B; ++i) {
    TokenSequence src = srcs[i];
    if (src.size() < 3) throw std::runtime_error("beam_search: source too short");
    src.ids[1] = tgt_tag;  // position 1 carries the target-language tag
    enc[i] = encode_source_for_decode(p, cfg, src);
    max_src = std::max(max_src, static_cast<int>(src.size()));
    BeamHyp root;
    root.cum = 0;
    root.greedy_lane = true;
    root.state.h = enc[i].final_state;
    root.state.c = RowVec::Zero(cfg.embed_dim);
    actives[i].push_back(std::move(root));
  }
  RowWork work(cfg, vocab, max_src);

  struct Cand {
    Scalar cum;
    int token;
    int parent;
    bool greedy;
  };
  // Strict total order (token, parent unique): cum desc, token asc, parent asc.
  auto before = [](const Cand& x, const Cand& y) {
    if (x.cum != y.cum) return x.cum > y.cum;
    if (x.token != y.token) return x.token < y.token;
    return x.parent < y.parent;
  };
  std::vector<Cand> best;
  std::vector<RowState> new_states;

  for (int t = 0; t < max_len; ++t) {
    bool any_active = false;
    for (int i = 0; i < B; ++i) {
      if (actives[i].empty()) continue;
      any_active = true;

      // Running top-`beam` selection in enumeration order; equivalent to a
      // full sort because `before` is a strict total order. The greedy
      // continuation is tracked separately and granted the last slot when it
      // would otherwise be pruned, so the greedy path is always explored.
      best.clear();
      Cand greedy_cand{0, -1, -1, false};
      bool have_greedy = false;
      auto offer = [&](const Cand& cd) {
        if (static_cast<int>(best.size()) < beam) {
          auto pos = std::upper_bound(best.begin(), best.end(), cd, before);
          best.insert(pos, cd);
        } else if (before(cd, best.back())) {
          best.pop_back();
          auto pos = std::upper_bound(best.begin(), best.end(), cd, before);
          best.insert(pos, cd);
        }
      };

      new_states.assign(actives[i].size(), RowState{});
      for (size_t a = 0; a < actives[i].size(); ++a) {
        BeamHyp& hyp = actives[i][a];
        const int input = hyp.toks.empty() ? Tokenizer::kBos : hyp.toks.back();
        RowState st = hyp.state;
        const RowVec& lp = decode_step_row(p, cfg, st, input, enc[i].top, enc[i].values, work);

        int greedy_tok = -1;
        if (hyp.greedy_lane) {
          Scalar gb = -std::numeric_limits<Scalar>::infinity();
          for (int v = 0; v < vocab; ++v)
            if (lp(v) > gb) {
              gb = lp(v);
              greedy_tok = v;
            }
        }
        if (t == max_len - 1) {
          // Final step: every surviving hypothesis is closed with eos.
          offer({hyp.cum + lp(eos), eos, static_cast<int>(a), hyp.greedy_lane});
          if (hyp.greedy_lane) {
            greedy_cand = {hyp.cum + lp(eos), eos, static_cast<int>(a), true};
            have_greedy = true;
          }
        } else {
          for (int v = 0; v < vocab; ++v)
            offer({hyp.cum + lp(v), v, static_cast<int>(a), hyp.greedy_lane && v == greedy_tok});
          if (greedy_tok >= 0) {
            greedy_cand = {hyp.cum + lp(greedy_tok), greedy_tok, static_cast<int>(a), true};
            have_greedy = true;
          }
        }
        new_states[a] = std::move(st);
      }

      if (have_greedy) {
        bool greedy_kept = false;
        for (const Cand& cd : best)
          if (cd.token == greedy_cand.token && cd.parent == greedy_cand.parent) greedy_kept = true;
        if (!greedy_kept && !best.empty()) best.back() = greedy_cand;
      }

      std::vector<BeamHyp> next;
      next.reserve(best.size());
      for (const Cand& cd : best) {
        if (cd.token == eos) {
          auto toks = actives[i][cd.parent].toks;
          toks.push_back(eos);
          done[i].push_back({cd.cum / static_cast<Scalar>(t + 1), std::move(toks)});
          continue;
        }
        BeamHyp h;
        h.toks = actives[i][cd.parent].toks;
        h.toks.push_back(cd.token);
        h.cum = cd.cum;
        h.greedy_lane = cd.greedy;
        h.state = new_states[cd.parent];
        next.push_back(std::move(h));
      }
      actives[i] = std::move(next);
    }
    if (!any_active) break;
  }

  std::vector<TokenSequence> out(B);
  for (int i = 0; i < B; ++i) {
    TokenSequence seq;
    seq.ids.push_back(Tokenizer::kBos);
    if (done[i].empty()) {
      seq.ids.push_back(eos);
    } else {
      const DoneHyp* best = &done[i][0];
      for (const auto& d : done[i])
        if (done_better(d, *best)) best = &d;
      seq.ids.insert(seq.ids.end(), best->toks.begin(), best->toks.end());
    }
    out[i] = std::move(seq);
  }
  return out;
}

TokenSequence beam_search(const Model& m, const TokenSequence& src, const LanguageTag& tgt_lang,
                          int beam, int max_len) {
  return beam_search_batch(m, {src}, tgt_lang, beam, max_len)[0];
}

// ---------------------------------------------------------------------------
// Expert pretraining

std::vector<EncodedPair> encode_corpus(const Tokenizer& tok, const ParallelCorpus& c) {
  std::vector<EncodedPair> out;
  out.reserve(c.pairs.size());
  for (const auto& [src, tgt] : c.pairs)
    out.push_back({tok.encode_source(src, c.src_lang, c.tgt_lang), tok.encode_target(tgt)});
  return out;
}

Model train_expert(const LanguageFamily& family,
                   const std::map<LanguageTag, ParallelCorpus>& tiered_corpora,
                   const Tokenizer& tok, const ExpertTrainConfig& cfg,
                   const std::vector<ParallelCorpus>* extra_corpora) {
  for (const auto& lang : family.originals)
    if (tiered_corpora.find(lang) == tiered_corpora.end())
      throw std::runtime_error("train_expert: missing corpus for " + lang.code);

  // Both directions of every original<->pivot pair, in declaration order.
  std::vector<EncodedPair> pool;
  for (const auto& lang : family.originals) {
    const ParallelCorpus& c = tiered_corpora.at(lang);
    for (const auto& [lang_side, pivot_side] : c.pairs) {
      pool.push_back({tok.encode_source(lang_side, lang, family.pivot),
                      tok.encode_target(pivot_side)});
      pool.push_back({tok.encode_source(pivot_side, family.pivot, lang),
                      tok.encode_target(lang_side)});
    }
  }
  if (extra_corpora != nullptr) {
    for (const ParallelCorpus& c : *extra_corpora) {
      for (const auto& [src_side, tgt_side] : c.pairs) {
        pool.push_back({tok.encode_source(src_side, c.src_lang, c.tgt_lang),
                        tok.encode_target(tgt_side)});
        pool.push_back({tok.encode_source(tgt_side, c.tgt_lang, c.src_lang),
                        tok.encode_target(src_side)});
      }
    }
  }
  if (pool.empty()) throw std::runtime_error("train_expert: empty training pool");

  Model m = Model::init(cfg.model, tok);
  AdamState opt;
  Rng rng(derive_seed(cfg.seed, "expert"));

  std::vector<size_t> order(pool.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t pos = order.size();  // forces an initial shuffle
  std::vector<EncodedPair> batch;
  for (int step = 0; step < cfg.steps; ++step) {
    batch.clear();
    while (static_cast<int>(batch.size()) < cfg.batch_size) {
      if (pos == order.size()) {
        rng.shuffle(order);
        pos = 0;
      }
      batch.push_back(pool[order[pos++]]);
    }
    train_step(m, opt, batch, cfg.lr, &rng);
  }
  m.freeze_expert();
  return m;
}

}  // namespace imitmt
