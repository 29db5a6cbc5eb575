// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "moelab/autograd.hpp"
#include "moelab/errors.hpp"
#include "moelab/kernels.hpp"

namespace moelab::ops {

namespace {

void require_matrix(const Var& v, const char* op) {
  if (v.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(v.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace

Var matmul(Var a, Var b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  if (b.value().rows() != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()));
  }
  Tensor out({m, n});
  kernels::gemm(a.value().data(), b.value().data(), out.data(), m, k, n);
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b, m, k, n](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    if (tape.needs_grad(a.id())) {
      std::vector<double> bt(k * n), tmp(m * k);
      kernels::transpose(b.value().data(), bt, k, n);
      kernels::gemm(g, bt, tmp, m, n, k);
      accumulate(tape.grad_buffer(a.id()), tmp);
    }
    if (tape.needs_grad(b.id())) {
      std::vector<double> at(k * m), tmp(k * n);
      kernels::transpose(a.value().data(), at, m, k);
      kernels::gemm(at, g, tmp, k, m, n);
      accumulate(tape.grad_buffer(b.id()), tmp);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().rows();
  if (b.value().cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_string(a.shape()) + " · " +
                         shape_string(b.shape()) + "ᵀ");
  }
  std::vector<double> bt(k * n);
  kernels::transpose(b.value().data(), bt, n, k);
  Tensor out({m, n});
  kernels::gemm(a.value().data(), bt, out.data(), m, k, n);
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b, m, k, n](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    if (tape.needs_grad(a.id())) {
      std::vector<double> tmp(m * k);
      kernels::gemm(g, b.value().data(), tmp, m, n, k);
      accumulate(tape.grad_buffer(a.id()), tmp);
    }
    if (tape.needs_grad(b.id())) {
      std::vector<double> gt(n * m), tmp(n * k);
      kernels::transpose(g, gt, m, n);
      kernels::gemm(gt, a.value().data(), tmp, n, m, k);
      accumulate(tape.grad_buffer(b.id()), tmp);
    }
  });
}

Var transpose(Var a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.value().rows(), c = a.value().cols();
  Tensor out({c, r});
  kernels::transpose(a.value().data(), out.data(), r, c);
  const Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, r, c](Tape& tape, std::size_t self) {
    std::vector<double> tmp(r * c);
    kernels::transpose(tape.grad(self), tmp, c, r);
    accumulate(tape.grad_buffer(a.id()), tmp);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  accumulate(out.data(), b.value().data());
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& tape, std::size_t self) {
    for (const Var& v : {a, b})
      if (tape.needs_grad(v.id())) accumulate(tape.grad_buffer(v.id()), tape.grad(self));
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    if (tape.needs_grad(a.id())) accumulate(tape.grad_buffer(a.id()), g);
    if (tape.needs_grad(b.id())) {
      auto d = tape.grad_buffer(b.id());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

Var add_row(Var a, Var row) {
  require_matrix(a, "add_row");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  if (row.value().numel() != n) {
    throw DimensionError("add_row: row of " + shape_string(row.shape()) + " does not match " + shape_string(a.shape()));
  }
  Tensor out = a.value();
  auto o = out.data();
  auto r = row.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] += r[j];
  const Var inputs[] = {a, row};
  return a.tape().record(std::move(out), inputs, [a, row, m, n](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    if (tape.needs_grad(a.id())) accumulate(tape.grad_buffer(a.id()), g);
    if (tape.needs_grad(row.id())) {
      auto d = tape.grad_buffer(row.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs, [a, b](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    if (tape.needs_grad(a.id())) {
      auto d = tape.grad_buffer(a.id());
      auto bv = b.value().data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (tape.needs_grad(b.id())) {
      auto d = tape.grad_buffer(b.id());
      auto av = a.value().data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  const Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs, [a, s](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    auto d = tape.grad_buffer(a.id());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
  });
}

Var silu(Var x) {
  Tensor out = x.value();
  auto xs = x.value().data();
  auto sig = std::make_shared<std::vector<double>>(xs.size());
  auto o = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-xs[i]));
    (*sig)[i] = s;
    o[i] = xs[i] * s;
  }
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [x, sig](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    auto xs = x.value().data();
    auto d = tape.grad_buffer(x.id());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double s = (*sig)[i];
      d[i] += g[i] * s * (1.0 + xs[i] * (1.0 - s));
    }
  });
}

Var layernorm(Var x, Var gain, Var bias, double eps) {
  const std::size_t d = last_dim(x.value());
  if (d < 2) throw DimensionError("layernorm: last axis must have at least 2 elements");
  if (eps <= 0.0) throw ContractError("layernorm: eps must be positive");
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw DimensionError("layernorm: gain/bias must have " + std::to_string(d) + " elements");
  }
  const std::size_t rows = x.value().numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.value().numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(x.shape());
  auto xs = x.value().data();
  auto gv = gain.value().data();
  auto bv = bias.value().data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      o[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const Var inputs[] = {x, gain, bias};
  return x.tape().record(std::move(out), inputs, [x, gain, bias, xhat, inv_std, rows, d](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    if (tape.needs_grad(gain.id())) {
      auto dg = tape.grad_buffer(gain.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * (*xhat)[r * d + j];
    }
    if (tape.needs_grad(bias.id())) {
      auto db = tape.grad_buffer(bias.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
    }
    if (tape.needs_grad(x.id())) {
      auto dx = tape.grad_buffer(x.id());
      auto gv = gain.value().data();
      std::vector<double> dh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dh[j] = g[r * d + j] * gv[j];
          mean_dh += dh[j];
          mean_dh_h += dh[j] * (*xhat)[r * d + j];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        const double is = (*inv_std)[r];
        for (std::size_t j = 0; j < d; ++j) {
          dx[r * d + j] += is * (dh[j] - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
        }
      }
    }
  });
}

Var softmax(Var x) {
  const std::size_t d = last_dim(x.value());
  const std::size_t rows = x.value().numel() / d;
  Tensor out(x.shape());
  auto xs = x.value().data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double mx = *std::max_element(xs.begin() + r * d, xs.begin() + (r + 1) * d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (o[r * d + j] = std::exp(xs[r * d + j] - mx));
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] /= z;
  }
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [x, rows, d](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    auto y = tape.value(self).data();
    auto dx = tape.grad_buffer(x.id());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.value().rows(), v = logits.value().cols();
  if (targets.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(m) +
                         " rows");
  }
  auto probs = std::make_shared<std::vector<double>>(m * v);
  auto xs = logits.value().data();
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v) throw InputError("cross_entropy: target id out of range");
    const double mx = *std::max_element(xs.begin() + r * v, xs.begin() + (r + 1) * v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += ((*probs)[r * v + j] = std::exp(xs[r * v + j] - mx));
    for (std::size_t j = 0; j < v; ++j) (*probs)[r * v + j] /= z;
    total += std::log(z) + mx - xs[r * v + static_cast<std::size_t>(t)];
  }
  Tensor out({1}, {total / static_cast<double>(m)});
  std::vector<int> tgt(targets.begin(), targets.end());
  const Var inputs[] = {logits};
  return logits.tape().record(std::move(out), inputs, [logits, probs, tgt = std::move(tgt), m, v](Tape& tape, std::size_t self) {
    const double g = tape.grad(self)[0] / static_cast<double>(m);
    auto dx = tape.grad_buffer(logits.id());
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < v; ++j) dx[r * v + j] += g * (*probs)[r * v + j];
      dx[r * v + static_cast<std::size_t>(tgt[r])] -= g;
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const Var inputs[] = {x};
  return x.tape().record(Tensor({1}, {s}), inputs, [x](Tape& tape, std::size_t self) {
    const double g = tape.grad(self)[0];
    for (double& d : tape.grad_buffer(x.id())) d += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [x](Tape& tape, std::size_t self) {
    accumulate(tape.grad_buffer(x.id()), tape.grad(self));
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  const std::size_t n = x.value().cols();
  if (begin >= end || end > x.value().rows()) throw DimensionError("slice_rows: invalid range");
  auto src = x.value().data();
  Tensor out({end - begin, n}, std::vector<double>(src.begin() + begin * n, src.begin() + end * n));
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [x, begin, n](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    auto d = tape.grad_buffer(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) d[begin * n + i] += g[i];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t n = parts.front().value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.value().cols() != n) throw DimensionError("concat_rows: column counts differ");
    rows += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(rows * n);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts.front().tape().record(Tensor({rows, n}, std::move(data)), inputs, [inputs](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    std::size_t offset = 0;
    for (const Var& p : inputs) {
      const std::size_t len = p.value().numel();
      if (tape.needs_grad(p.id())) accumulate(tape.grad_buffer(p.id()), g.subspan(offset, len));
      offset += len;
    }
  });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t n = x.value().cols(), m = x.value().rows();
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  Tensor out({rows.size(), n});
  auto src = x.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(src.begin() + rows[i] * n, n, o.begin() + i * n);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [x, idx = std::move(idx), n](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    auto d = tape.grad_buffer(x.id());
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) d[idx[i] * n + j] += g[i * n + j];
  });
}

Var embedding(Var table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.value().rows()) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(table.value().rows()) + " rows");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, rows);
}

Var normalize(Var x) {
  double sq = 0.0;
  for (double v : x.value().data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0)) throw DegenerateParameterError("normalize: zero-norm tensor of shape " + shape_string(x.shape()));
  Tensor out = x.value();
  for (double& v : out.data()) v /= norm;
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs, [x, norm](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    auto y = tape.value(self).data();
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
    auto d = tape.grad_buffer(x.id());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += (g[i] - y[i] * dot) / norm;
  });
}

Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads) {
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  require_matrix(q, "causal_attention");
  const std::size_t d = q.value().cols();
  if (q.value().rows() != batch * seq) throw DimensionError("causal_attention: rows != batch·seq");
  if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
  const std::size_t dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<double>>(batch * heads * seq * seq, 0.0);
  Tensor out({batch * seq, d});
  auto qs = q.value().data();
  auto ks = k.value().data();
  auto vs = v.value().data();
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + (b * heads + h) * seq * seq;
      const std::size_t col = h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qs.data() + (b * seq + i) * d + col;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = ks.data() + (b * seq + j) * d + col;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * seq + j] = s * scl;
          mx = std::max(mx, p[i * seq + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) z += (p[i * seq + j] = std::exp(p[i * seq + j] - mx));
        double* oi = o.data() + (b * seq + i) * d + col;
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * seq + j] /= z;
          const double* vj = vs.data() + (b * seq + j) * d + col;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[i * seq + j] * vj[c];
        }
      }
    }
  }
  const Var inputs[] = {q, k, v};
  return q.tape().record(std::move(out), inputs, [q, k, v, probs, batch, seq, heads, d, dh, scl](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    auto qs = q.value().data();
    auto ks = k.value().data();
    auto vs = v.value().data();
    std::vector<double> dq(q.value().numel(), 0.0), dk(dq.size(), 0.0), dv(dq.size(), 0.0);
    std::vector<double> dp(seq);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = probs->data() + (b * heads + h) * seq * seq;
        const std::size_t col = h * dh;
        for (std::size_t i = 0; i < seq; ++i) {
          const double* gi = g.data() + (b * seq + i) * d + col;
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            const std::size_t rj = (b * seq + j) * d + col;
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
              s += gi[c] * vs[rj + c];
              dv[rj + c] += p[i * seq + j] * gi[c];
            }
            dp[j] = s;
            dot += s * p[i * seq + j];
          }
          const std::size_t ri = (b * seq + i) * d + col;
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = p[i * seq + j] * (dp[j] - dot) * scl;
            const std::size_t rj = (b * seq + j) * d + col;
            for (std::size_t c = 0; c < dh; ++c) {
              dq[ri + c] += ds * ks[rj + c];
              dk[rj + c] += ds * qs[ri + c];
            }
          }
        }
      }
    }
    if (tape.needs_grad(q.id())) accumulate(tape.grad_buffer(q.id()), dq);
    if (tape.needs_grad(k.id())) accumulate(tape.grad_buffer(k.id()), dk);
    if (tape.needs_grad(v.id())) accumulate(tape.grad_buffer(v.id()), dv);
  });
}

Var topk_softmax(Var logits, std::span<const std::size_t> selected, std::size_t k) {
  require_matrix(logits, "topk_softmax");
  const std::size_t t = logits.value().rows(), n = logits.value().cols();
  if (k == 0 || k > n) throw ConfigError("topk_softmax: k must be in [1, " + std::to_string(n) + "]");
  if (selected.size() != t * k) throw DimensionError("topk_softmax: selection size mismatch");
  auto ls = logits.value().data();
  Tensor out({t, k});
  auto o = out.data();
  for (std::size_t r = 0; r < t; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < k; ++s) {
      if (selected[r * k + s] >= n) throw DimensionError("topk_softmax: expert index out of range");
      mx = std::max(mx, ls[r * n + selected[r * k + s]]);
    }
    double z = 0.0;
    for (std::size_t s = 0; s < k; ++s) z += (o[r * k + s] = std::exp(ls[r * n + selected[r * k + s]] - mx));
    for (std::size_t s = 0; s < k; ++s) o[r * k + s] /= z;
  }
  std::vector<std::size_t> sel(selected.begin(), selected.end());
  const Var inputs[] = {logits};
  return logits.tape().record(std::move(out), inputs, [logits, sel = std::move(sel), t, n, k](Tape& tape, std::size_t self) {
    auto g = tape.grad(self);
    auto y = tape.value(self).data();
    auto d = tape.grad_buffer(logits.id());
    for (std::size_t r = 0; r < t; ++r) {
      double dot = 0.0;
      for (std::size_t s = 0; s < k; ++s) dot += g[r * k + s] * y[r * k + s];
      for (std::size_t s = 0; s < k; ++s) d[r * n + sel[r * k + s]] += y[r * k + s] * (g[r * k + s] - dot);
    }
  });
}

Var moe_combine(Var gates, std::span<const Var> expert_outputs, std::span<const SlotRoute> routes, std::size_t tokens,
                std::size_t k) {
  require_matrix(gates, "moe_combine");
  if (gates.value().rows() != tokens || gates.value().cols() != k || routes.size() != tokens * k) {
    throw DimensionError("moe_combine: gate/route layout mismatch");
  }
  std::size_t width = 0;
  for (const SlotRoute& r : routes) {
    if (r.expert >= expert_outputs.size() || !expert_outputs[r.expert].valid()) {
      throw DimensionError("moe_combine: route references a missing expert output");
    }
    const Tensor& h = expert_outputs[r.expert].value();
    if (r.row >= h.rows()) throw DimensionError("moe_combine: route row out of range");
    if (width == 0) width = h.cols();
    if (h.cols() != width) throw DimensionError("moe_combine: expert widths differ");
  }
  Tensor out({tokens, width});
  auto o = out.data();
  auto gv = gates.value().data();
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t s = 0; s < k; ++s) {
      const SlotRoute& r = routes[t * k + s];
      const double* h = expert_outputs[r.expert].value().data().data() + r.row * width;
      const double w = gv[t * k + s];
      for (std::size_t j = 0; j < width; ++j) o[t * width + j] += w * h[j];
    }
  }
  std::vector<Var> inputs{gates};
  std::vector<std::size_t> slot_of_expert(expert_outputs.size(), 0);
  for (std::size_t e = 0; e < expert_outputs.size(); ++e) {
    if (expert_outputs[e].valid()) {
      slot_of_expert[e] = inputs.size();
      inputs.push_back(expert_outputs[e]);
    }
  }
  std::vector<SlotRoute> rt(routes.begin(), routes.end());
  return gates.tape().record(
      std::move(out), inputs,
      [inputs, slot_of_expert, rt = std::move(rt), tokens, k, width](Tape& tape, std::size_t self) {
        auto g = tape.grad(self);
        const Var& gates = inputs.front();
        auto gv = gates.value().data();
        const bool want_gates = tape.needs_grad(gates.id());
        std::span<double> dg = want_gates ? tape.grad_buffer(gates.id()) : std::span<double>{};
        for (std::size_t t = 0; t < tokens; ++t) {
          const double* gt = g.data() + t * width;
          for (std::size_t s = 0; s < k; ++s) {
            const SlotRoute& r = rt[t * k + s];
            const Var& h = inputs[slot_of_expert[r.expert]];
            const double* hv = h.value().data().data() + r.row * width;
            if (want_gates) {
              double dot = 0.0;
              for (std::size_t j = 0; j < width; ++j) dot += gt[j] * hv[j];
              dg[t * k + s] += dot;
            }
            if (tape.needs_grad(h.id())) {
              auto dh = tape.grad_buffer(h.id());
              const double w = gv[t * k + s];
              for (std::size_t j = 0; j < width; ++j) dh[r.row * width + j] += w * gt[j];
            }
          }
        }
      });
}

}  // namespace moelab::ops
