#include <doctest.h>

#include <cmath>
#include <vector>

#include "aclam/gradcheck.hpp"
#include "aclam/model.hpp"
#include "aclam/rng.hpp"
#include "micro_model.hpp"

using namespace aclam;
using namespace aclam::lam;
using ad::ScalarFn;
using ad::Shape;
using namespace aclam::micro;

namespace {

// Image inputs as the networks see them.
std::vector<double> pix(std::vector<double> v) {
  for (double& x : v) {
    x = 2 * x - 1;
  }
  return v;
}

// Plain-loop evaluation of an MLP, independent of the graph code.
std::vector<double> naive_mlp(const Mlp<double>& mlp, std::vector<double> x) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& w = mlp.layers[l].weight;
    const auto& b = mlp.layers[l].bias;
    const std::size_t in = w.dim(0), out = w.dim(1);
    std::vector<double> y(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) {
        s += x[i] * w[i * out + o];
      }
      y[o] = l + 1 < mlp.layers.size() ? std::tanh(s) : s;
    }
    x = y;
  }
  return x;
}

std::vector<double> row(const Tensor<double>& t, std::size_t r) {
  const std::size_t c = t.dim(1);
  return {t.data().begin() + static_cast<long>(r * c), t.data().begin() + static_cast<long>((r + 1) * c)};
}

std::vector<double> cat(std::vector<double> a, const std::vector<double>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<double> naive_quantize(const ModelParams<double>& p, const std::vector<double>& z_pre) {
  const auto cd = static_cast<std::size_t>(p.config.code_dim);
  std::vector<double> z;
  for (std::size_t s = 0; s < z_pre.size() / cd; ++s) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t r = 0; r < p.codebook.dim(0); ++r) {
      double d = 0;
      for (std::size_t c = 0; c < cd; ++c) {
        d += std::pow(z_pre[s * cd + c] - p.codebook[r * cd + c], 2);
      }
      if (d < best_d) {
        best_d = d;
        best = r;
      }
    }
    for (std::size_t c = 0; c < cd; ++c) {
      z.push_back(p.codebook[best * cd + c]);
    }
  }
  return z;
}

}  // namespace

TEST_CASE("idm_forward shape and determinism") {
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 16;
  cfg.idm_hidden = {32};
  cfg.fdm_hidden = {32};
  auto params = ModelParams<float>::init(cfg, 1);
  Rng rng(2);
  auto pairs = random_pairs<float>(cfg, 3, rng);
  Graph<float> g(false);
  auto a = idm_forward(g, params, pairs.o_i, pairs.o_j);
  auto b = idm_forward(g, params, pairs.o_i, pairs.o_j);
  CHECK(a.shape() == Shape{3, 16});
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  CHECK_THROWS_AS(idm_forward(g, params, pairs.o_i, pairs.s_j), ad::ShapeError);
}

TEST_CASE("vq nearest neighbour and tie rule") {
  Graph<double> g;
  auto codebook = Tensor<double>::from({2, 2}, {0, 0, 1, 0}, true);
  auto lat = vq_quantize(g, Tensor<double>::from({1, 2}, {0.9, 0.1}), codebook, 1);
  CHECK(lat.indices[0] == 1);
  CHECK(lat.z[0] == 1.0);
  CHECK(lat.z[1] == 0.0);
  auto tie = vq_quantize(g, Tensor<double>::from({1, 2}, {0.5, 0.0}), codebook, 1);
  CHECK(tie.indices[0] == 0);
  CHECK_THROWS_AS(vq_quantize(g, Tensor<double>::from({1, 3}, {0, 0, 0}), codebook, 1),
                  ad::ShapeError);
  CHECK_THROWS_AS(vq_quantize(g, Tensor<double>::from({1, 2}, {0, 0}), Tensor<double>(), 1),
                  std::invalid_argument);
}

TEST_CASE("straight-through gradient equals the identity-bottleneck gradient") {
  const auto cfg = micro_config();
  auto params = ModelParams<double>::init(cfg, 5);
  Rng rng(6);
  auto pairs = random_pairs<double>(cfg, 4, rng);
  auto z_pre = random_batch<double>(4, 4, rng, -1, 1);
  z_pre.set_requires_grad(true);

  Graph<double> g1;
  auto lat = vq_quantize(g1, z_pre, params.codebook, cfg.n_tokens);
  g1.backward(g1.mse(pairs.o_j, fdm_img(g1, params, pairs.o_i, lat.z)));
  const auto through_quantizer = z_pre.grad_or_zeros();

  auto z_leaf = Tensor<double>::from(lat.z.shape(), {lat.z.data().begin(), lat.z.data().end()}, true);
  params.zero_grad();
  Graph<double> g2;
  g2.backward(g2.mse(pairs.o_j, fdm_img(g2, params, pairs.o_i, z_leaf)));
  const auto identity = z_leaf.grad_or_zeros();
  REQUIRE(through_quantizer.size() == identity.size());
  for (std::size_t i = 0; i < identity.size(); ++i) {
    CHECK(std::abs(through_quantizer[i] - identity[i]) < 1e-7);
  }
}

TEST_CASE("loss_vq values and codebook sparsity") {
  LossWeights w;
  {
    Graph<double> g;
    auto codebook = Tensor<double>::from({2, 2}, {0, 0, 5, 5}, true);
    auto lat = vq_quantize(g, Tensor<double>::from({1, 2}, {1, 0}, true), codebook, 1);
    CHECK(loss_vq(g, lat, 2, w).item() == doctest::Approx(1.25).epsilon(1e-12));
  }
  {
    Graph<double> g;
    auto codebook = Tensor<double>::from({2, 2}, {0, 0, 5, 5}, true);
    auto lat = vq_quantize(g, Tensor<double>::from({1, 2}, {5, 5}, true), codebook, 1);
    CHECK(loss_vq(g, lat, 2, w).item() == 0.0);
  }
  {
    Graph<double> g;
    auto codebook = Tensor<double>::from({4, 2}, {0, 0, 5, 5, -5, 5, 9, 9}, true);
    auto z_pre = Tensor<double>::from({2, 2}, {0.3, -0.2, 4.0, 5.5}, true);
    auto lat = vq_quantize(g, z_pre, codebook, 1);
    g.backward(loss_vq(g, lat, 2, w));
    const auto grad = codebook.grad_or_zeros();
    CHECK(grad[2 * 2] == 0.0);
    CHECK(grad[2 * 2 + 1] == 0.0);
    CHECK(grad[3 * 2] == 0.0);
    CHECK(grad[3 * 2 + 1] == 0.0);
    CHECK(grad[0] != 0.0);
    CHECK(grad[2] != 0.0);
  }
}

TEST_CASE("loss_ac_idm hand values") {
  auto zik = Tensor<double>::from({1, 2}, {2, 0}, true);
  auto zij = Tensor<double>::from({1, 2}, {1, 0}, true);
  auto zjk = Tensor<double>::from({1, 2}, {0, 1}, true);
  for (auto v : {IdmVariant::kNoSg, IdmVariant::kSgZik, IdmVariant::kSgSum}) {
    Graph<double> g;
    CHECK(loss_ac_idm(g, zik, zij, zjk, v).item() == doctest::Approx(2.0));
    auto additive = Tensor<double>::from({1, 2}, {1, 1});
    CHECK(loss_ac_idm(g, additive, zij, zjk, v).item() == 0.0);
  }
  Graph<double> g;
  auto zero = Tensor<double>::zeros({3, 2}, true);
  CHECK(loss_ac_idm(g, zero, zero, zero, IdmVariant::kNoSg).item() == 0.0);
  CHECK_THROWS_AS(loss_ac_idm(g, zik, zij, zjk, static_cast<IdmVariant>(7)), std::invalid_argument);
}

TEST_CASE("idm stop-gradient variants route gradients as named") {
  auto zik = Tensor<double>::from({1, 2}, {2, 0}, true);
  auto zij = Tensor<double>::from({1, 2}, {1, 0}, true);
  auto zjk = Tensor<double>::from({1, 2}, {0, 1}, true);
  {
    Graph<double> g;
    g.backward(loss_ac_idm(g, zik, zij, zjk, IdmVariant::kSgZik));
    CHECK_FALSE(zik.has_grad());
    CHECK(zij.has_grad());
  }
  zij.zero_grad();
  zjk.zero_grad();
  {
    Graph<double> g;
    g.backward(loss_ac_idm(g, zik, zij, zjk, IdmVariant::kSgSum));
    CHECK(zik.has_grad());
    CHECK_FALSE(zij.has_grad());
    CHECK_FALSE(zjk.has_grad());
  }
}

TEST_CASE("loss_rec matches a plain-loop evaluation on a 2-pixel micro model") {
  const auto cfg = micro_config();
  auto params = ModelParams<double>::init(cfg, 0);
  int counter = 0;
  for (auto& [name, t] : params.named()) {
    for (double& v : t.mutable_data()) {
      v = 0.05 * ((counter++ % 9) - 4);
    }
  }
  Rng rng(8);
  auto pairs = random_pairs<double>(cfg, 2, rng);
  LossWeights w;
  Graph<double> g;
  auto lat = encode(g, params, pairs.o_i, pairs.o_j);
  auto rec = loss_rec(g, params, pairs, lat, w);

  double img = 0, prop = 0;
  for (std::size_t b = 0; b < 2; ++b) {
    const auto z_pre = naive_mlp(params.idm, cat(pix(row(pairs.o_i, b)), pix(row(pairs.o_j, b))));
    const auto z = naive_quantize(params, z_pre);
    auto pred = naive_mlp(params.fdm_img, cat(pix(row(pairs.o_i, b)), z));
    const auto target = row(pairs.o_j, b);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-pred[i]));
      img += (s - target[i]) * (s - target[i]);
    }
    const auto sp = naive_mlp(params.fdm_proprio, cat(row(pairs.s_i, b), z));
    const auto st = row(pairs.s_j, b);
    for (int d = 0; d < 2; ++d) {
      prop += (sp[d] - st[d]) * (sp[d] - st[d]);
    }
  }
  img /= 2 * 6;
  prop /= 2 * 2;
  CHECK(std::abs(rec.total.item() - (img + prop)) < 1e-6);
  CHECK(rec.total.item() >= 0);

  // An exact decoder output as target gives zero reconstruction error.
  Graph<double> g2;
  auto pred = fdm_img(g2, params, pairs.o_i, lat.z);
  CHECK(g2.mse(pred, pred.clone()).item() == 0.0);
}

TEST_CASE("loss_ac_fdm matches a plain-loop evaluation") {
  const auto cfg = micro_config();
  auto params = ModelParams<double>::init(cfg, 3);
  Rng rng(9);
  auto tri = random_triples<double>(cfg, 3, rng);
  auto zij = random_batch<double>(3, 4, rng, -1, 1);
  auto zjk = random_batch<double>(3, 4, rng, -1, 1);
  LossWeights w;
  Graph<double> g;
  const double got = loss_ac_fdm(g, params, tri, zij, zjk, w).item();
  double img = 0, prop = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<double> z = row(zij, b);
    const auto z2 = row(zjk, b);
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] += z2[i];
    }
    auto pred = naive_mlp(params.fdm_img, cat(pix(row(tri.o_i, b)), z));
    const auto target = row(tri.o_k, b);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-pred[i]));
      img += (s - target[i]) * (s - target[i]);
    }
    const auto sp = naive_mlp(params.fdm_proprio, cat(row(tri.s_i, b), z));
    const auto st = row(tri.s_k, b);
    for (int d = 0; d < 2; ++d) {
      prop += (sp[d] - st[d]) * (sp[d] - st[d]);
    }
  }
  CHECK(std::abs(got - (img / 18 + prop / 6)) < 1e-6);
  CHECK(got >= 0);
}

TEST_CASE("total_loss bookkeeping and the lambda = 0 control") {
  const auto cfg = micro_config();
  auto params = ModelParams<float>::init(cfg, 4);
  Rng rng(10);
  auto pairs = random_pairs<float>(cfg, 5, rng);
  auto tri = random_triples<float>(cfg, 5, rng);
  LossWeights w;
  w.w_proprio = 0.5;
  w.lambda_ac = 0.7;
  for (AcForm form : {AcForm::kFdm, AcForm::kIdmNoSg, AcForm::kIdmSgZik, AcForm::kIdmSgSum}) {
    Graph<float> g;
    auto br = total_loss(g, params, pairs, tri, w, form, Placement::kPostVq);
    CHECK(br.rec >= 0);
    CHECK(br.proprio >= 0);
    CHECK(br.vq >= 0);
    CHECK(br.ac >= 0);
    const double sum = br.rec + w.w_proprio * br.proprio + br.vq + w.lambda_ac * br.ac;
    CHECK(std::abs(br.total.item() - sum) < 1e-6);
  }

  w.lambda_ac = 0;
  Graph<float> g;
  auto br = total_loss(g, params, pairs, tri, w, AcForm::kFdm, Placement::kPostVq);
  CHECK(br.ac == 0.0);
  Graph<float> g2;
  auto lat = encode(g2, params, pairs.o_i, pairs.o_j);
  auto rec = loss_rec(g2, params, pairs, lat, w);
  auto baseline = g2.add(rec.total, loss_vq(g2, lat, cfg.code_dim, w));
  CHECK(br.total.item() == baseline.item());
}

TEST_CASE("gradients of every model piece match finite differences") {
  auto cfg = micro_config();
  cfg.vq_identity = true;
  auto params = ModelParams<double>::init(cfg, 12);
  Rng rng(13);
  auto pairs = random_pairs<double>(cfg, 3, rng);
  auto tri = random_triples<double>(cfg, 3, rng);

  SUBCASE("idm weights") {
    ScalarFn<double> f = [&](Graph<double>& g) {
      return g.mse(idm_forward(g, params, pairs.o_i, pairs.o_j), Tensor<double>::zeros({3, 4}));
    };
    std::vector<Tensor<double>> wrt;
    for (auto& layer : params.idm.layers) {
      wrt.push_back(layer.weight);
      wrt.push_back(layer.bias);
    }
    CHECK(ad::finite_diff_check(f, wrt, 1e-6) < 1e-5);
  }
  SUBCASE("fdm_img w.r.t. z") {
    auto z = random_batch<double>(3, 4, rng, -1, 1);
    ScalarFn<double> f = [&](Graph<double>& g) {
      return g.mse(fdm_img(g, params, pairs.o_i, z), pairs.o_j);
    };
    CHECK(ad::finite_diff_check(f, {z}, 1e-6) < 1e-5);
  }
  SUBCASE("fdm_proprio") {
    auto z = random_batch<double>(3, 4, rng, -1, 1);
    ScalarFn<double> f = [&](Graph<double>& g) {
      return g.mse(fdm_proprio(g, params, pairs.s_i, z), pairs.s_j);
    };
    std::vector<Tensor<double>> wrt{z};
    for (auto& layer : params.fdm_proprio.layers) {
      wrt.push_back(layer.weight);
      wrt.push_back(layer.bias);
    }
    CHECK(ad::finite_diff_check(f, wrt, 1e-6) < 1e-5);
  }
  SUBCASE("total loss, all parameters, forms without stop-gradient on the encoder path") {
    // Each quantizer term stops the gradient on one side; switched off here and
    // checked on its own below.
    LossWeights w;
    w.w_codebook = 0;
    w.beta_commit = 0;
    for (AcForm form : {AcForm::kFdm, AcForm::kIdmNoSg}) {
      for (Placement pl : {Placement::kPostVq, Placement::kPreVq}) {
        ScalarFn<double> f = [&](Graph<double>& g) {
          return total_loss(g, params, pairs, tri, w, form, pl).total;
        };
        CAPTURE(to_string(form));
        CHECK(ad::finite_diff_check(f, all_params(params), 1e-6) < 1e-5);
      }
    }
  }
  SUBCASE("stop-gradient forms, decoder parameters") {
    LossWeights w;
    for (AcForm form : {AcForm::kIdmSgZik, AcForm::kIdmSgSum}) {
      ScalarFn<double> f = [&](Graph<double>& g) {
        return total_loss(g, params, pairs, tri, w, form, Placement::kPostVq).total;
      };
      std::vector<Tensor<double>> wrt;
      for (auto* mlp : {&params.fdm_img, &params.fdm_proprio}) {
        for (auto& layer : mlp->layers) {
          wrt.push_back(layer.weight);
          wrt.push_back(layer.bias);
        }
      }
      CHECK(ad::finite_diff_check(f, wrt, 1e-6) < 1e-5);
    }
  }
}

TEST_CASE("quantized losses match finite differences where the gradient is exact") {
  const auto cfg = micro_config();
  auto params = ModelParams<double>::init(cfg, 21);
  Rng rng(22);
  auto pairs = random_pairs<double>(cfg, 3, rng);
  auto tri = random_triples<double>(cfg, 3, rng);
  LossWeights w;
  SUBCASE("decoders under the full objective") {
    ScalarFn<double> f = [&](Graph<double>& g) {
      return total_loss(g, params, pairs, tri, w, AcForm::kFdm, Placement::kPostVq).total;
    };
    std::vector<Tensor<double>> wrt;
    for (auto* mlp : {&params.fdm_img, &params.fdm_proprio}) {
      for (auto& layer : mlp->layers) {
        wrt.push_back(layer.weight);
        wrt.push_back(layer.bias);
      }
    }
    CHECK(ad::finite_diff_check(f, wrt, 1e-6) < 1e-5);
  }
  SUBCASE("codebook under the codebook term") {
    w.beta_commit = 0;
    ScalarFn<double> f = [&](Graph<double>& g) {
      return loss_vq(g, encode(g, params, pairs.o_i, pairs.o_j), cfg.code_dim, w);
    };
    CHECK(ad::finite_diff_check(f, {params.codebook}, 1e-6) < 1e-5);
  }
  SUBCASE("encoder under the commitment term") {
    w.w_codebook = 0;
    ScalarFn<double> f = [&](Graph<double>& g) {
      return loss_vq(g, encode(g, params, pairs.o_i, pairs.o_j), cfg.code_dim, w);
    };
    std::vector<Tensor<double>> wrt;
    for (auto& layer : params.idm.layers) {
      wrt.push_back(layer.weight);
      wrt.push_back(layer.bias);
    }
    CHECK(ad::finite_diff_check(f, wrt, 1e-6) < 1e-5);
  }
}

TEST_CASE("latent placements") {
  const auto cfg = micro_config();
  auto params = ModelParams<double>::init(cfg, 30);
  Rng rng(31);
  auto pairs = random_pairs<double>(cfg, 2, rng);
  auto post = latent(params, pairs.o_i, pairs.o_j, Placement::kPostVq);
  auto pre = latent(params, pairs.o_i, pairs.o_j, Placement::kPreVq);
  Graph<double> g(false);
  auto z_pre = idm_forward(g, params, pairs.o_i, pairs.o_j);
  CHECK(std::equal(pre.data().begin(), pre.data().end(), z_pre.data().begin()));
  for (std::size_t b = 0; b < 2; ++b) {
    const auto expect = naive_quantize(params, row(z_pre, b));
    CHECK(row(post, b) == expect);
  }
  ModelConfig def;
  CHECK(def.latent_dim() == 16);
}

TEST_CASE("ac form and placement names") {
  CHECK(parse_ac_form("idm-sg-zik") == AcForm::kIdmSgZik);
  CHECK(parse_ac_form("idm_no_sg") == AcForm::kIdmNoSg);
  CHECK(parse_placement("pre") == Placement::kPreVq);
  CHECK_THROWS_AS(parse_ac_form("bogus"), std::invalid_argument);
  CHECK_THROWS_AS(parse_placement("mid"), std::invalid_argument);
}
