// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "kvnorm/errors.hpp"
#include "kvnorm/model.hpp"
#include "kvnorm/tensor.hpp"
#include "kvnorm/transformer.hpp"

namespace kvnorm {

namespace detail {

// dW += X^T * dY, routed through the vectorized matmul kernel.
inline void accum_xt_dy(const Tensor2D& x, const Tensor2D& dy, Tensor2D& dw) {
  Tensor2D prod = matmul(transpose(x), dy);
  for (std::size_t i = 0; i < dw.size(); ++i) dw.data[i] += prod.data[i];
}

// dX = dY * W^T.
inline Tensor2D dy_wt(const Tensor2D& dy, const Tensor2D& w) {
  return matmul(dy, transpose(w));
}

struct LayerActs {
  Tensor2D x_in;                // residual stream entering the layer
  Tensor2D a;                   // rmsnorm(x_in) for attention
  std::vector<Tensor2D> qh, kh, vh;  // per head, post-rope, n x d_head
  std::vector<Tensor2D> probs;       // per head, n x n causal rows
  Tensor2D concat;              // head outputs side by side, n x d
  Tensor2D x_mid;               // after the attention residual
  Tensor2D b;                   // rmsnorm(x_mid) for the MLP
  Tensor2D h1;                  // pre-activation, n x d_ff
  Tensor2D act;                 // gelu(h1)
};

// y = rmsnorm(x) * gain backward. Returns dx, accumulates dgain.
inline Tensor2D rmsnorm_backward(const Tensor2D& dy, const Tensor2D& x,
                                 std::span<const float> gain, float eps,
                                 std::span<float> dgain) {
  const std::size_t n = x.rows;
  const std::size_t d = x.cols;
  Tensor2D dx(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const float* xr = x.data.data() + i * d;
    const float* dyr = dy.data.data() + i * d;
    float* dxr = dx.data.data() + i * d;
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      ss += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
    }
    const double mean = ss / static_cast<double>(d) + eps;
    const double r = 1.0 / std::sqrt(mean);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      s += static_cast<double>(dyr[j]) * gain[j] * xr[j];
      dgain[j] += static_cast<float>(static_cast<double>(dyr[j]) * xr[j] * r);
    }
    const double coeff = r * r * r * s / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dxr[j] = static_cast<float>(r * gain[j] * dyr[j] -
                                  static_cast<double>(xr[j]) * coeff);
    }
  }
  return dx;
}

}  // namespace detail

// Mean cross-entropy over all positions of one sequence plus gradients of
// every weight group, accumulated into `grads` scaled by `scale`.
inline double sequence_loss_and_grad(const Model& model,
                                     std::span<const int> tokens,
                                     std::span<const int> targets,
                                     ModelWeights& grads, double scale) {
  const auto& cfg = model.config;
  const auto& w = model.weights;
  if (tokens.empty() || tokens.size() != targets.size()) {
    throw ShapeError("sequence_loss_and_grad: token/target shape mismatch");
  }
  const std::size_t n = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t dk = cfg.d_head;
  const std::size_t H = cfg.num_heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dk));

  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;

  // ---- forward, stashing activations -------------------------------------
  Tensor2D x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const int tok = tokens[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size) {
      throw ConfigError("sequence_loss_and_grad: token out of vocab");
    }
    auto src = w.token_embedding.row(static_cast<std::size_t>(tok));
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }

  std::vector<detail::LayerActs> acts(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    auto& A = acts[l];
    const auto& lw = w.layers[l];
    A.x_in = x;
    A.a = Tensor2D(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      ops::rmsnorm_row(A.x_in.row(i), lw.norm_attn_gain.row(0), cfg.norm_eps,
                       A.a.row(i));
    }
    Tensor2D qf = matmul(A.a, lw.w_q);
    Tensor2D kf = matmul(A.a, lw.w_k);
    Tensor2D vf = matmul(A.a, lw.w_v);
    A.qh.resize(H);
    A.kh.resize(H);
    A.vh.resize(H);
    A.probs.resize(H);
    A.concat = Tensor2D(n, d);
    for (std::size_t h = 0; h < H; ++h) {
      Tensor2D qh(n, dk), kh(n, dk), vh(n, dk);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dk; ++c) {
          qh.at(i, c) = qf.at(i, h * dk + c);
          kh.at(i, c) = kf.at(i, h * dk + c);
          vh.at(i, c) = vf.at(i, h * dk + c);
        }
      }
      if (cfg.use_rope) {
        qh = apply_rope(qh, positions);
        kh = apply_rope(kh, positions);
      }
      Tensor2D scores = matmul(qh, transpose(kh));
      for (float& v : scores.data) v *= inv_sqrt;
      Tensor2D probs(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        std::span<float> row(scores.data.data() + i * n, i + 1);
        std::copy(row.begin(), row.end(), probs.data.data() + i * n);
        ops::softmax_inplace({probs.data.data() + i * n, i + 1});
      }
      Tensor2D oh = matmul(probs, vh);  // upper triangle of probs is zero
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dk; ++c) {
          A.concat.at(i, h * dk + c) = oh.at(i, c);
        }
      }
      A.qh[h] = std::move(qh);
      A.kh[h] = std::move(kh);
      A.vh[h] = std::move(vh);
      A.probs[h] = std::move(probs);
    }
    Tensor2D attn_out = matmul(A.concat, lw.w_o);
    A.x_mid = A.x_in;
    for (std::size_t i = 0; i < A.x_mid.size(); ++i) {
      A.x_mid.data[i] += attn_out.data[i];
    }
    A.b = Tensor2D(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      ops::rmsnorm_row(A.x_mid.row(i), lw.norm_mlp_gain.row(0), cfg.norm_eps,
                       A.b.row(i));
    }
    A.h1 = matmul(A.b, lw.mlp_in);
    A.act = A.h1;
    for (float& v : A.act.data) v = ops::gelu(v);
    Tensor2D mlp_out = matmul(A.act, lw.mlp_out);
    x = A.x_mid;
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += mlp_out.data[i];
  }

  Tensor2D logits = matmul(x, w.unembedding);

  // ---- loss and dlogits ---------------------------------------------------
  double loss = 0.0;
  Tensor2D dlogits(n, cfg.vocab_size);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int tgt = targets[i];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= cfg.vocab_size) {
      throw ConfigError("sequence_loss_and_grad: target out of vocab");
    }
    const float* lr = logits.data.data() + i * cfg.vocab_size;
    float maxv = lr[0];
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) maxv = std::max(maxv, lr[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) {
      denom += std::exp(static_cast<double>(lr[j]) - maxv);
    }
    const double lse = maxv + std::log(denom);
    loss += (lse - lr[static_cast<std::size_t>(tgt)]) * inv_n;
    float* dl = dlogits.data.data() + i * cfg.vocab_size;
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) {
      const double p = std::exp(static_cast<double>(lr[j]) - lse);
      dl[j] = static_cast<float>(p * inv_n);
    }
    dl[static_cast<std::size_t>(tgt)] -= static_cast<float>(inv_n);
  }
  if (!std::isfinite(loss)) {
    throw NumericError("sequence_loss_and_grad: non-finite loss");
  }
  if (scale != 1.0) {
    for (float& v : dlogits.data) v = static_cast<float>(v * scale);
  }

  // ---- backward -----------------------------------------------------------
  detail::accum_xt_dy(x, dlogits, grads.unembedding);
  Tensor2D dx = detail::dy_wt(dlogits, w.unembedding);

  for (std::size_t l = cfg.num_layers; l-- > 0;) {
    const auto& A = acts[l];
    const auto& lw = w.layers[l];
    auto& gl = grads.layers[l];

    // MLP block.
    detail::accum_xt_dy(A.act, dx, gl.mlp_out);
    Tensor2D dact = detail::dy_wt(dx, lw.mlp_out);
    Tensor2D dh1 = dact;
    for (std::size_t i = 0; i < dh1.size(); ++i) {
      dh1.data[i] *= ops::gelu_grad(A.h1.data[i]);
    }
    detail::accum_xt_dy(A.b, dh1, gl.mlp_in);
    Tensor2D db = detail::dy_wt(dh1, lw.mlp_in);
    Tensor2D dx_mid = detail::rmsnorm_backward(
        db, A.x_mid, lw.norm_mlp_gain.row(0), cfg.norm_eps,
        gl.norm_mlp_gain.row(0));
    for (std::size_t i = 0; i < dx_mid.size(); ++i) {
      dx_mid.data[i] += dx.data[i];  // residual branch
    }

    // Attention block.
    detail::accum_xt_dy(A.concat, dx_mid, gl.w_o);
    Tensor2D dconcat = detail::dy_wt(dx_mid, lw.w_o);
    Tensor2D dqf(n, d), dkf(n, d), dvf(n, d);
    for (std::size_t h = 0; h < H; ++h) {
      Tensor2D doh(n, dk);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dk; ++c) {
          doh.at(i, c) = dconcat.at(i, h * dk + c);
        }
      }
      const Tensor2D& probs = A.probs[h];
      Tensor2D dprobs = matmul(doh, transpose(A.vh[h]));
      Tensor2D dvh = matmul(transpose(probs), doh);
      // Softmax backward on the causal rows.
      Tensor2D dscores(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          dot += static_cast<double>(dprobs.at(i, j)) * probs.at(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) {
          dscores.at(i, j) = static_cast<float>(
              probs.at(i, j) *
              (static_cast<double>(dprobs.at(i, j)) - dot) * inv_sqrt);
        }
      }
      Tensor2D dqh = matmul(dscores, A.kh[h]);
      Tensor2D dkh = matmul(transpose(dscores), A.qh[h]);
      if (cfg.use_rope) {
        for (std::size_t i = 0; i < n; ++i) {
          ops::rope_row_inverse(dqh.row(i), i);
          ops::rope_row_inverse(dkh.row(i), i);
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dk; ++c) {
          dqf.at(i, h * dk + c) = dqh.at(i, c);
          dkf.at(i, h * dk + c) = dkh.at(i, c);
          dvf.at(i, h * dk + c) = dvh.at(i, c);
        }
      }
    }
    detail::accum_xt_dy(A.a, dqf, gl.w_q);
    detail::accum_xt_dy(A.a, dkf, gl.w_k);
    detail::accum_xt_dy(A.a, dvf, gl.w_v);
    Tensor2D da = detail::dy_wt(dqf, lw.w_q);
    Tensor2D tmp = detail::dy_wt(dkf, lw.w_k);
    for (std::size_t i = 0; i < da.size(); ++i) da.data[i] += tmp.data[i];
    tmp = detail::dy_wt(dvf, lw.w_v);
    for (std::size_t i = 0; i < da.size(); ++i) da.data[i] += tmp.data[i];

    Tensor2D dx_in = detail::rmsnorm_backward(
        da, A.x_in, lw.norm_attn_gain.row(0), cfg.norm_eps,
        gl.norm_attn_gain.row(0));
    for (std::size_t i = 0; i < dx_in.size(); ++i) {
      dx_in.data[i] += dx_mid.data[i];  // residual branch
    }
    dx = std::move(dx_in);
  }

  for (std::size_t i = 0; i < n; ++i) {
    float* er =
        grads.token_embedding.data.data() +
        static_cast<std::size_t>(tokens[i]) * d;
    const float* dr = dx.data.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) er[j] += dr[j];
  }
  return loss;
}

struct TrainStepResult {
  double loss = 0.0;
  ModelWeights grads;
};

// Mean cross-entropy over every position of the batch, with gradients by
// reverse-mode differentiation of the full forward. Batch items may run on
// separate threads; gradients reduce in item order either way.
inline TrainStepResult forward_train(const Model& model,
                                     const std::vector<std::vector<int>>& token_batch,
                                     const std::vector<std::vector<int>>& target_batch,
                                     std::size_t threads = 1) {
  if (token_batch.empty() || token_batch.size() != target_batch.size()) {
    throw ShapeError("forward_train: empty or mismatched batch");
  }
  const std::size_t B = token_batch.size();
  const double inv_b = 1.0 / static_cast<double>(B);

  std::vector<ModelWeights> item_grads(B);
  std::vector<double> item_loss(B, 0.0);
  std::vector<std::exception_ptr> item_error(B);

  auto run_item = [&](std::size_t b) {
    try {
      item_grads[b] = zero_weights(model.config);
      item_loss[b] = sequence_loss_and_grad(model, token_batch[b],
                                            target_batch[b], item_grads[b],
                                            inv_b);
    } catch (...) {
      item_error[b] = std::current_exception();
    }
  };

  if (threads <= 1 || B == 1) {
    for (std::size_t b = 0; b < B; ++b) run_item(b);
  } else {
    std::vector<std::thread> pool;
    std::size_t next = 0;
    const std::size_t nthreads = std::min(threads, B);
    std::mutex mu;
    for (std::size_t tix = 0; tix < nthreads; ++tix) {
      pool.emplace_back([&]() {
        for (;;) {
          std::size_t b;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= B) return;
            b = next++;
          }
          run_item(b);
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (std::size_t b = 0; b < B; ++b) {
    if (item_error[b]) std::rethrow_exception(item_error[b]);
  }

  TrainStepResult out;
  out.grads = zero_weights(model.config);
  for (std::size_t b = 0; b < B; ++b) {
    out.loss += item_loss[b] * inv_b;
    // Fixed reduction order keeps results independent of thread count.
    std::size_t ti = 0;
    std::vector<Tensor2D*> dst;
    out.grads.for_each_tensor([&](Tensor2D& t) { dst.push_back(&t); });
    item_grads[b].for_each_tensor([&](Tensor2D& t) {
      Tensor2D& d = *dst[ti++];
      for (std::size_t i = 0; i < d.size(); ++i) d.data[i] += t.data[i];
    });
  }
  if (!std::isfinite(out.loss)) {
    throw NumericError("forward_train: non-finite loss");
  }
  return out;
}

}  // namespace kvnorm
