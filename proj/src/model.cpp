#include "aclam/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "aclam/rng.hpp"

namespace aclam::lam {

std::string to_string(Placement p) { return p == Placement::kPostVq ? "post_vq" : "pre_vq"; }

std::string to_string(AcForm f) {
  switch (f) {
    case AcForm::kFdm: return "fdm";
    case AcForm::kIdmNoSg: return "idm-no-sg";
    case AcForm::kIdmSgZik: return "idm-sg-zik";
    case AcForm::kIdmSgSum: return "idm-sg-sum";
  }
  return "?";
}

Placement parse_placement(const std::string& s) {
  if (s == "post" || s == "post_vq" || s == "post-vq") {
    return Placement::kPostVq;
  }
  if (s == "pre" || s == "pre_vq" || s == "pre-vq") {
    return Placement::kPreVq;
  }
  throw std::invalid_argument("unknown VQ placement '" + s + "' (expected post or pre)");
}

AcForm parse_ac_form(const std::string& raw) {
  std::string s = raw;
  for (char& c : s) {
    if (c == '_') {
      c = '-';
    }
  }
  for (AcForm f : {AcForm::kFdm, AcForm::kIdmNoSg, AcForm::kIdmSgZik, AcForm::kIdmSgSum}) {
    if (s == to_string(f)) {
      return f;
    }
  }
  throw std::invalid_argument("unknown AC form '" + raw +
                              "' (expected fdm, idm-no-sg, idm-sg-zik or idm-sg-sum)");
}

void LossWeights::validate() const {
  for (double v : {lambda_ac, beta_commit, w_codebook, w_proprio}) {
    if (!std::isfinite(v) || v < 0) {
      throw std::invalid_argument("loss weights must be finite and non-negative");
    }
  }
}

template <typename T>
Tensor<T> Mlp<T>::forward(Graph<T>& g, const Tensor<T>& x) const {
  Tensor<T> h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = g.add(g.matmul(h, layers[l].weight), layers[l].bias);
    if (l + 1 < layers.size()) {
      h = g.tanh(h);
    }
  }
  return h;
}

namespace {

template <typename T>
Mlp<T> make_mlp(int in, const std::vector<int>& hidden, int out, Rng& rng) {
  Mlp<T> mlp;
  std::vector<int> widths{in};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(out);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto fan_in = static_cast<std::size_t>(widths[l]);
    const auto fan_out = static_cast<std::size_t>(widths[l + 1]);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> w(fan_in * fan_out), b(fan_out);
    for (auto& v : w) {
      v = static_cast<T>(rng.uniform(-bound, bound));
    }
    for (auto& v : b) {
      v = static_cast<T>(rng.uniform(-bound, bound));
    }
    mlp.layers.push_back({Tensor<T>::from({fan_in, fan_out}, std::move(w), true),
                          Tensor<T>::from({fan_out}, std::move(b), true)});
  }
  return mlp;
}

template <typename T>
void check_batch(const Tensor<T>& x, std::size_t width, const char* what) {
  if (x.rank() != 2 || x.dim(1) != width) {
    throw ad::ShapeError(std::string(what) + ": expected [B x " + std::to_string(width) + "], got " +
                         ad::shape_str(x.shape()));
  }
}

// Pixels enter the networks as 2x - 1.
template <typename T>
Tensor<T> centered(const Tensor<T>& img) {
  std::vector<T> v(img.data().begin(), img.data().end());
  for (T& x : v) {
    x = T(2) * x - T(1);
  }
  return Tensor<T>::from(img.shape(), std::move(v));
}

template <typename T>
double row_norm_mean(const Tensor<T>& z) {
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  double acc = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = z[r * cols + c];
      sq += v * v;
    }
    acc += std::sqrt(sq);
  }
  return acc / static_cast<double>(rows);
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.codebook_size < 1 || cfg.code_dim < 1 || cfg.n_tokens < 1) {
    throw std::invalid_argument("codebook geometry must be positive");
  }
  Rng rng(hash_ids({seed, 0x1A7E47ULL}));
  ModelParams p;
  p.config = cfg;
  const int d = cfg.image_dim();
  const int l = cfg.latent_dim();
  p.idm = make_mlp<T>(2 * d, cfg.idm_hidden, l, rng);
  std::vector<T> cb(static_cast<std::size_t>(cfg.codebook_size * cfg.code_dim));
  for (auto& v : cb) {
    v = static_cast<T>(rng.uniform(-0.5, 0.5));
  }
  p.codebook = Tensor<T>::from(
      {static_cast<std::size_t>(cfg.codebook_size), static_cast<std::size_t>(cfg.code_dim)},
      std::move(cb), true);
  p.fdm_img = make_mlp<T>(d + l, cfg.fdm_hidden, d, rng);
  p.fdm_proprio = make_mlp<T>(2 + l, cfg.proprio_hidden, 2, rng);
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelParams<T>::named() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  auto add_mlp = [&out](const std::string& prefix, const Mlp<T>& mlp) {
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
      out.emplace_back(prefix + "." + std::to_string(l) + ".weight", mlp.layers[l].weight);
      out.emplace_back(prefix + "." + std::to_string(l) + ".bias", mlp.layers[l].bias);
    }
  };
  add_mlp("idm", idm);
  out.emplace_back("codebook", codebook);
  add_mlp("fdm_img", fdm_img);
  add_mlp("fdm_proprio", fdm_proprio);
  return out;
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& [name, t] : named()) {
    t.zero_grad();
  }
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  return cast<T>();
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  auto conv = [](const Tensor<T>& t) {
    std::vector<U> v(t.data().begin(), t.data().end());
    return Tensor<U>::from(t.shape(), std::move(v), true);
  };
  auto conv_mlp = [&conv](const Mlp<T>& m) {
    Mlp<U> out;
    for (const auto& layer : m.layers) {
      out.layers.push_back({conv(layer.weight), conv(layer.bias)});
    }
    return out;
  };
  ModelParams<U> p;
  p.config = config;
  p.idm = conv_mlp(idm);
  p.codebook = conv(codebook);
  p.fdm_img = conv_mlp(fdm_img);
  p.fdm_proprio = conv_mlp(fdm_proprio);
  return p;
}

template <typename T>
Tensor<T> idm_forward(Graph<T>& g, const ModelParams<T>& params, const Tensor<T>& o_i,
                      const Tensor<T>& o_j) {
  const auto d = static_cast<std::size_t>(params.config.image_dim());
  check_batch(o_i, d, "idm_forward o_i");
  check_batch(o_j, d, "idm_forward o_j");
  if (o_i.dim(0) != o_j.dim(0)) {
    throw ad::ShapeError("idm_forward: batch sizes differ");
  }
  return params.idm.forward(g, g.concat({centered(o_i), centered(o_j)}));
}

template <typename T>
LatentBatch<T> vq_quantize(Graph<T>& g, const Tensor<T>& z_pre, const Tensor<T>& codebook,
                           int n_tokens, bool identity) {
  if (!codebook.defined() || codebook.rank() != 2 || codebook.size() == 0) {
    throw std::invalid_argument("vq_quantize: empty codebook");
  }
  const std::size_t k = codebook.dim(0);
  const std::size_t cd = codebook.dim(1);
  const auto nt = static_cast<std::size_t>(n_tokens);
  if (z_pre.rank() != 2 || z_pre.dim(1) != nt * cd) {
    throw ad::ShapeError("vq_quantize: z_pre " + ad::shape_str(z_pre.shape()) +
                         " does not split into " + std::to_string(nt) + " slices of " +
                         std::to_string(cd));
  }
  const std::size_t batch = z_pre.dim(0);
  const auto zv = z_pre.data();
  const auto cv = codebook.data();

  LatentBatch<T> out;
  out.z_pre = z_pre;
  out.indices.resize(batch * nt);
  for (std::size_t s = 0; s < batch * nt; ++s) {
    const T* slice = zv.data() + s * cd;
    std::size_t best = 0;
    T best_d = std::numeric_limits<T>::infinity();
    for (std::size_t r = 0; r < k; ++r) {
      T d = T(0);
      for (std::size_t c = 0; c < cd; ++c) {
        const T diff = slice[c] - cv[r * cd + c];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = r;
      }
    }
    out.indices[s] = best;
  }
  out.codes = g.reshape(g.gather_rows(codebook, out.indices), {batch, nt * cd});
  out.z = identity ? z_pre : g.straight_through(z_pre, out.codes);
  return out;
}

template <typename T>
LatentBatch<T> encode(Graph<T>& g, const ModelParams<T>& params, const Tensor<T>& o_i,
                      const Tensor<T>& o_j) {
  return vq_quantize(g, idm_forward(g, params, o_i, o_j), params.codebook, params.config.n_tokens,
                     params.config.vq_identity);
}

template <typename T>
Tensor<T> fdm_img(Graph<T>& g, const ModelParams<T>& params, const Tensor<T>& o_i,
                  const Tensor<T>& z) {
  check_batch(o_i, static_cast<std::size_t>(params.config.image_dim()), "fdm_img o_i");
  check_batch(z, static_cast<std::size_t>(params.config.latent_dim()), "fdm_img z");
  return g.sigmoid(params.fdm_img.forward(g, g.concat({centered(o_i), z})));
}

template <typename T>
Tensor<T> fdm_proprio(Graph<T>& g, const ModelParams<T>& params, const Tensor<T>& s_i,
                      const Tensor<T>& z) {
  check_batch(s_i, 2, "fdm_proprio s_i");
  check_batch(z, static_cast<std::size_t>(params.config.latent_dim()), "fdm_proprio z");
  return params.fdm_proprio.forward(g, g.concat({s_i, z}));
}

template <typename T>
RecLoss<T> loss_rec(Graph<T>& g, const ModelParams<T>& params, const PairBatch<T>& batch,
                    const LatentBatch<T>& latent, const LossWeights& w) {
  RecLoss<T> out;
  out.image = g.mse(batch.o_j, fdm_img(g, params, batch.o_i, latent.z));
  out.proprio = g.mse(batch.s_j, fdm_proprio(g, params, batch.s_i, latent.z));
  out.total = g.add(out.image, g.scale(out.proprio, static_cast<T>(w.w_proprio)));
  return out;
}

template <typename T>
Tensor<T> loss_vq(Graph<T>& g, const LatentBatch<T>& latent, int code_dim, const LossWeights& w) {
  // mse averages over code_dim too; rescale to per-slice squared norms.
  const T per_slice = static_cast<T>(code_dim);
  Tensor<T> codebook_term = g.mse(g.stop_gradient(latent.z_pre), latent.codes);
  Tensor<T> commit_term = g.mse(latent.z_pre, g.stop_gradient(latent.codes));
  return g.add(g.scale(codebook_term, static_cast<T>(w.w_codebook) * per_slice),
               g.scale(commit_term, static_cast<T>(w.beta_commit) * per_slice));
}

template <typename T>
Tensor<T> loss_ac_fdm(Graph<T>& g, const ModelParams<T>& params, const TripleBatch<T>& batch,
                      const Tensor<T>& z_ij, const Tensor<T>& z_jk, const LossWeights& w) {
  Tensor<T> z_sum = g.add(z_ij, z_jk);
  Tensor<T> loss = g.mse(batch.o_k, fdm_img(g, params, batch.o_i, z_sum));
  if (w.ac_proprio) {
    Tensor<T> prop = g.mse(batch.s_k, fdm_proprio(g, params, batch.s_i, z_sum));
    loss = g.add(loss, g.scale(prop, static_cast<T>(w.w_proprio)));
  }
  return loss;
}

template <typename T>
Tensor<T> loss_ac_idm(Graph<T>& g, const Tensor<T>& z_ik, const Tensor<T>& z_ij,
                      const Tensor<T>& z_jk, IdmVariant variant) {
  Tensor<T> sum = g.add(z_ij, z_jk);
  Tensor<T> direct = z_ik;
  switch (variant) {
    case IdmVariant::kNoSg: break;
    case IdmVariant::kSgZik: direct = g.stop_gradient(z_ik); break;
    case IdmVariant::kSgSum: sum = g.stop_gradient(sum); break;
    default: throw std::invalid_argument("loss_ac_idm: unknown variant");
  }
  return g.scale(g.mse(direct, sum), static_cast<T>(z_ik.dim(1)));
}

template <typename T>
LossBreakdown<T> total_loss(Graph<T>& g, const ModelParams<T>& params, const PairBatch<T>& pairs,
                            const TripleBatch<T>& triples, const LossWeights& w, AcForm form,
                            Placement placement) {
  w.validate();
  LossBreakdown<T> out;
  const LatentBatch<T> lat = encode(g, params, pairs.o_i, pairs.o_j);
  const RecLoss<T> rec = loss_rec(g, params, pairs, lat, w);
  const Tensor<T> vq = loss_vq(g, lat, params.config.code_dim, w);
  out.total = g.add(rec.total, vq);
  out.rec = rec.image.item();
  out.proprio = rec.proprio.item();
  out.vq = vq.item();
  out.mean_z_norm = row_norm_mean(lat.at(placement));
  out.pair_indices = lat.indices;
  out.pair_z_pre.assign(lat.z_pre.data().begin(), lat.z_pre.data().end());

  if (w.lambda_ac > 0) {
    const LatentBatch<T> ij = encode(g, params, triples.o_i, triples.o_j);
    const LatentBatch<T> jk = encode(g, params, triples.o_j, triples.o_k);
    Tensor<T> ac;
    if (form == AcForm::kFdm) {
      ac = loss_ac_fdm(g, params, triples, ij.at(placement), jk.at(placement), w);
    } else {
      const LatentBatch<T> ik = encode(g, params, triples.o_i, triples.o_k);
      const IdmVariant variant = form == AcForm::kIdmNoSg   ? IdmVariant::kNoSg
                                 : form == AcForm::kIdmSgZik ? IdmVariant::kSgZik
                                                             : IdmVariant::kSgSum;
      ac = loss_ac_idm(g, ik.at(placement), ij.at(placement), jk.at(placement), variant);
    }
    out.ac = ac.item();
    out.total = g.add(out.total, g.scale(ac, static_cast<T>(w.lambda_ac)));
  }
  return out;
}

template <typename T>
Tensor<T> latent(const ModelParams<T>& params, const Tensor<T>& o_i, const Tensor<T>& o_j,
                 Placement placement) {
  Graph<T> g(false);
  const LatentBatch<T> lat = encode(g, params, o_i, o_j);
  return lat.at(placement).clone();
}

#define ACLAM_INSTANTIATE(T)                                                                      \
  template struct Mlp<T>;                                                                         \
  template struct ModelParams<T>;                                                                 \
  template Tensor<T> idm_forward(Graph<T>&, const ModelParams<T>&, const Tensor<T>&,              \
                                 const Tensor<T>&);                                               \
  template LatentBatch<T> vq_quantize(Graph<T>&, const Tensor<T>&, const Tensor<T>&, int, bool); \
  template LatentBatch<T> encode(Graph<T>&, const ModelParams<T>&, const Tensor<T>&,              \
                                 const Tensor<T>&);                                               \
  template Tensor<T> fdm_img(Graph<T>&, const ModelParams<T>&, const Tensor<T>&,                  \
                             const Tensor<T>&);                                                   \
  template Tensor<T> fdm_proprio(Graph<T>&, const ModelParams<T>&, const Tensor<T>&,              \
                                 const Tensor<T>&);                                               \
  template RecLoss<T> loss_rec(Graph<T>&, const ModelParams<T>&, const PairBatch<T>&,             \
                               const LatentBatch<T>&, const LossWeights&);                        \
  template Tensor<T> loss_vq(Graph<T>&, const LatentBatch<T>&, int, const LossWeights&);         \
  template Tensor<T> loss_ac_fdm(Graph<T>&, const ModelParams<T>&, const TripleBatch<T>&,         \
                                 const Tensor<T>&, const Tensor<T>&, const LossWeights&);         \
  template Tensor<T> loss_ac_idm(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                 IdmVariant);                                                     \
  template LossBreakdown<T> total_loss(Graph<T>&, const ModelParams<T>&, const PairBatch<T>&,     \
                                       const TripleBatch<T>&, const LossWeights&, AcForm,         \
                                       Placement);                                                \
  template Tensor<T> latent(const ModelParams<T>&, const Tensor<T>&, const Tensor<T>&, Placement);

ACLAM_INSTANTIATE(float)
ACLAM_INSTANTIATE(double)

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;

}  // namespace aclam::lam
