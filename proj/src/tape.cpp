#include "twopass/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace twopass {
namespace {

std::string op_shapes(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace

template <typename T>
void Tape<T>::clear() {
  ops_.clear();
  outputs_.clear();
}

template <typename T>
bool Tape<T>::wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!record_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T>
Tensor<T> Tape<T>::output(Shape shape, bool grad) {
  return Tensor<T>::zeros(std::move(shape), grad);
}

template <typename T>
void Tape<T>::record(const Tensor<T>& out, std::function<void()> fn) {
  outputs_.push_back(out);
  ops_.push_back(std::move(fn));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
  }
  for (auto& out : outputs_) out.zero_grad();
  Tensor<T> seed = loss;
  seed.grad()[0] = T(1);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

// ------------------------------------------------------------ linear algebra

template <typename T>
Tensor<T> Tape<T>::matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  using kernels::GemmOp;
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError(op_shapes("matmul", a.shape(), b.shape()));
  }
  const std::size_t k = a.dim(-1);
  const std::size_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (k != bk) throw ShapeError(op_shapes("matmul", a.shape(), b.shape()));

  std::size_t batch = 1;
  std::size_t m = a.dim(-2);
  if (b.rank() == 2) {
    m = a.numel() / k;  // fold leading dims of a into the row count
  } else {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw ShapeError(op_shapes("matmul", a.shape(), b.shape()));
    }
    batch = a.numel() / (m * k);
  }
  Shape shape = a.shape();
  shape.back() = n;
  const bool grad = wants_grad({&a, &b});
  Tensor<T> out = output(shape, grad);
  kernels::gemm<T>(backend_, transpose_b ? GemmOp::nt : GemmOp::nn, batch, m, n, k, a.values(),
                   b.values(), out.values(), false);
  if (grad) {
    record(out, [=, this, a = a, b = b]() mutable {
      auto g = std::span<const T>(out.grad());
      if (a.requires_grad()) {
        // dA = dC · Bᵀ  (or dC · B when B was transposed)
        kernels::gemm<T>(backend_, transpose_b ? GemmOp::nn : GemmOp::nt, batch, m, k, n, g,
                         b.values(), a.grad(), true);
      }
      if (b.requires_grad()) {
        if (transpose_b) {
          // dB[n,k] = dCᵀ · A
          kernels::gemm<T>(backend_, GemmOp::tn, batch, n, k, m, g, a.values(), b.grad(), true);
        } else {
          // dB[k,n] = Aᵀ · dC
          kernels::gemm<T>(backend_, GemmOp::tn, batch, k, n, m, a.values(), g, b.grad(), true);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose: need rank >= 2, got " + shape_string(a.shape()));
  const std::size_t r = a.dim(-2);
  const std::size_t c = a.dim(-1);
  const std::size_t batch = a.numel() / (r * c);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  const bool grad = wants_grad({&a});
  Tensor<T> out = output(shape, grad);
  auto x = a.values();
  auto y = out.values();
  for (std::size_t z = 0; z < batch; ++z) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) y[z * r * c + j * r + i] = x[z * r * c + i * c + j];
    }
  }
  if (grad) {
    record(out, [=, a = a]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t z = 0; z < batch; ++z) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) ga[z * r * c + i * c + j] += g[z * r * c + j * r + i];
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------ elementwise

template <typename T>
Tensor<T> Tape<T>::add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(b.shape(), a.shape())) throw ShapeError(op_shapes("add", a.shape(), b.shape()));
  const std::size_t nb = b.numel();
  const bool grad = wants_grad({&a, &b});
  Tensor<T> out = output(a.shape(), grad);
  auto x = a.values();
  auto y = b.values();
  auto o = out.values();
  for (std::size_t r = 0; r < o.size(); r += nb) {
    for (std::size_t j = 0; j < nb; ++j) o[r + j] = x[r + j] + y[j];
  }
  if (grad) {
    record(out, [=, a = a, b = b]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t r = 0; r < g.size(); r += nb) {
          for (std::size_t j = 0; j < nb; ++j) gb[j] += g[r + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(b.shape(), a.shape())) throw ShapeError(op_shapes("mul", a.shape(), b.shape()));
  const std::size_t nb = b.numel();
  const bool grad = wants_grad({&a, &b});
  Tensor<T> out = output(a.shape(), grad);
  auto x = a.values();
  auto y = b.values();
  auto o = out.values();
  for (std::size_t r = 0; r < o.size(); r += nb) {
    for (std::size_t j = 0; j < nb; ++j) o[r + j] = x[r + j] * y[j];
  }
  if (grad) {
    record(out, [=, a = a, b = b]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        auto yv = b.values();
        for (std::size_t r = 0; r < g.size(); r += nb) {
          for (std::size_t j = 0; j < nb; ++j) ga[r + j] += g[r + j] * yv[j];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        auto xv = a.values();
        for (std::size_t r = 0; r < g.size(); r += nb) {
          for (std::size_t j = 0; j < nb; ++j) gb[j] += g[r + j] * xv[r + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::scale(const Tensor<T>& a, T factor) {
  const bool grad = wants_grad({&a});
  Tensor<T> out = output(a.shape(), grad);
  auto x = a.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (grad) {
    record(out, [=, a = a]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::relu(const Tensor<T>& a) {
  const bool grad = wants_grad({&a});
  Tensor<T> out = output(a.shape(), grad);
  auto x = a.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > T(0) ? x[i] : T(0);
  if (grad) {
    record(out, [=, a = a]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      auto xv = a.values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > T(0)) ga[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::softmax(const Tensor<T>& a) {
  const std::size_t cols = a.dim(-1);
  const std::size_t rows = a.numel() / cols;
  const bool grad = wants_grad({&a});
  Tensor<T> out = output(a.shape(), grad);
  kernels::softmax_rows<T>(backend_, rows, cols, a.values(), out.values());
  if (grad) {
    record(out, [=, this, a = a]() mutable {
      kernels::softmax_rows_backward<T>(backend_, rows, cols, out.values(), out.grad(), a.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::log_softmax(const Tensor<T>& a) {
  const std::size_t cols = a.dim(-1);
  const std::size_t rows = a.numel() / cols;
  const bool grad = wants_grad({&a});
  Tensor<T> out = output(a.shape(), grad);
  kernels::log_softmax_rows<T>(backend_, rows, cols, a.values(), out.values());
  if (grad) {
    record(out, [=, this, a = a]() mutable {
      kernels::log_softmax_rows_backward<T>(backend_, rows, cols, out.values(), out.grad(),
                                            a.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                              T eps) {
  const std::size_t cols = x.dim(-1);
  if (gain.numel() != cols || bias.numel() != cols) {
    throw ShapeError(op_shapes("layer_norm", x.shape(), gain.shape()));
  }
  const std::size_t rows = x.numel() / cols;
  const bool grad = wants_grad({&x, &gain, &bias});
  Tensor<T> out = output(x.shape(), grad);
  auto stats = std::make_shared<std::vector<T>>(2 * rows);
  std::span<T> mean(stats->data(), rows);
  std::span<T> rstd(stats->data() + rows, rows);
  kernels::layer_norm_rows<T>(backend_, rows, cols, x.values(), gain.values(), bias.values(), eps,
                              out.values(), mean, rstd);
  if (grad) {
    record(out, [=, this, x = x, gain = gain, bias = bias]() mutable {
      std::span<const T> mu(stats->data(), rows);
      std::span<const T> rs(stats->data() + rows, rows);
      kernels::layer_norm_rows_backward<T>(
          backend_, rows, cols, x.values(), gain.values(), mu, rs, out.grad(),
          x.requires_grad() ? x.grad() : std::span<T>(),
          gain.requires_grad() ? gain.grad() : std::span<T>(),
          bias.requires_grad() ? bias.grad() : std::span<T>());
    });
  }
  return out;
}

// ------------------------------------------------------------ indexing

template <typename T>
Tensor<T> Tape<T>::embedding(const Tensor<T>& table, std::span<const TokenId> ids, Shape leading) {
  if (table.rank() != 2 || shape_numel(leading) != ids.size()) {
    throw ShapeError("embedding: table " + shape_string(table.shape()) + ", " +
                     std::to_string(ids.size()) + " ids for leading shape " +
                     shape_string(leading));
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t h = table.dim(1);
  Shape shape = std::move(leading);
  shape.push_back(h);
  const bool grad = wants_grad({&table});
  Tensor<T> out = output(shape, grad);
  auto w = table.values();
  auto o = out.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(vocab));
    }
    std::copy_n(w.begin() + ids[i] * h, h, o.begin() + i * h);
  }
  if (grad) {
    std::vector<TokenId> kept(ids.begin(), ids.end());
    record(out, [=, ids = std::move(kept), table = table]() mutable {
      auto g = out.grad();
      auto gw = table.grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = 0; j < h; ++j) gw[ids[i] * h + j] += g[i * h + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows) {
  const std::size_t w = a.dim(-1);
  const std::size_t n = a.numel() / w;
  const bool grad = wants_grad({&a});
  Tensor<T> out = output({rows.size(), w}, grad);
  auto x = a.values();
  auto o = out.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                       shape_string(a.shape()));
    }
    std::copy_n(x.begin() + rows[i] * w, w, o.begin() + i * w);
  }
  if (grad) {
    std::vector<std::size_t> kept(rows.begin(), rows.end());
    record(out, [=, kept = std::move(kept), a = a]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < kept.size(); ++i) {
        for (std::size_t j = 0; j < w; ++j) ga[kept[i] * w + j] += g[i * w + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::concat(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  bool grad = false;
  for (const auto& p : parts) {
    Shape l = p.shape();
    l.pop_back();
    if (l != lead) throw ShapeError(op_shapes("concat", parts[0].shape(), p.shape()));
    total += p.dim(-1);
    grad = grad || wants_grad({&p});
  }
  const std::size_t rows = shape_numel(lead);
  Shape shape = lead;
  shape.push_back(total);
  Tensor<T> out = output(shape, grad);
  auto o = out.values();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(-1);
    auto v = p.values();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.begin() + r * w, w, o.begin() + r * total + offset);
    }
    offset += w;
  }
  if (grad) {
    std::vector<Tensor<T>> kept(parts.begin(), parts.end());
    record(out, [=, kept = std::move(kept)]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : kept) {
        const std::size_t w = p.dim(-1);
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * total + off + j];
          }
        }
        off += w;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::slice(const Tensor<T>& a, std::size_t start, std::size_t length) {
  const std::size_t w = a.dim(-1);
  if (start + length > w || length == 0) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside last axis of " + shape_string(a.shape()));
  }
  const std::size_t rows = a.numel() / w;
  Shape shape = a.shape();
  shape.back() = length;
  const bool grad = wants_grad({&a});
  Tensor<T> out = output(shape, grad);
  auto x = a.values();
  auto o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.begin() + r * w + start, length, o.begin() + r * length);
  }
  if (grad) {
    record(out, [=, a = a]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < length; ++j) ga[r * w + start + j] += g[r * length + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::masked_fill(const Tensor<T>& a, const Mask& mask, T value) {
  const std::size_t nm = mask ? mask->size() : 0;
  if (nm == 0 || a.numel() % nm != 0) {
    throw ShapeError("masked_fill: mask of " + std::to_string(nm) + " entries for " +
                     shape_string(a.shape()));
  }
  const bool grad = wants_grad({&a});
  Tensor<T> out = output(a.shape(), grad);
  auto x = a.values();
  auto o = out.values();
  const auto& m = *mask;
  for (std::size_t r = 0; r < o.size(); r += nm) {
    for (std::size_t j = 0; j < nm; ++j) o[r + j] = m[j] ? value : x[r + j];
  }
  if (grad) {
    record(out, [=, a = a]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      const auto& mm = *mask;
      for (std::size_t r = 0; r < g.size(); r += nm) {
        for (std::size_t j = 0; j < nm; ++j) {
          if (!mm[j]) ga[r + j] += g[r + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError(op_shapes("reshape", a.shape(), shape));
  }
  const bool grad = wants_grad({&a});
  Tensor<T> out = output(std::move(shape), grad);
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  if (grad) {
    record(out, [=, a = a]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::sum(const Tensor<T>& a) {
  const bool grad = wants_grad({&a});
  Tensor<T> out = output({1}, grad);
  double s = 0;
  for (T v : a.values()) s += v;
  out.values()[0] = static_cast<T>(s);
  if (grad) {
    record(out, [=, a = a]() mutable {
      const T g = out.grad()[0];
      auto ga = a.grad();
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::pick_sum(const Tensor<T>& a, std::span<const TokenId> targets,
                            std::span<const T> weights) {
  const std::size_t v = a.dim(-1);
  const std::size_t rows = a.numel() / v;
  if (targets.size() != rows || weights.size() != rows) {
    throw ShapeError("pick_sum: " + std::to_string(targets.size()) + " targets and " +
                     std::to_string(weights.size()) + " weights for " + std::to_string(rows) +
                     " rows");
  }
  const bool grad = wants_grad({&a});
  Tensor<T> out = output({1}, grad);
  auto x = a.values();
  double s = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (weights[i] == T(0)) continue;  // keeps -inf at masked targets out of the sum
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw ShapeError("pick_sum: target " + std::to_string(targets[i]) + " out of range");
    }
    s += static_cast<double>(weights[i]) * static_cast<double>(x[i * v + targets[i]]);
  }
  out.values()[0] = static_cast<T>(s);
  if (grad) {
    std::vector<TokenId> t(targets.begin(), targets.end());
    std::vector<T> w(weights.begin(), weights.end());
    record(out, [=, t = std::move(t), w = std::move(w), a = a]() mutable {
      const T g = out.grad()[0];
      auto ga = a.grad();
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (w[i] != T(0)) ga[i * v + t[i]] += g * w[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> Tape<T>::dropout(const Tensor<T>& a, T rate, std::mt19937_64& rng) {
  if (rate <= T(0)) return a;
  if (rate >= T(1)) throw ShapeError("dropout: rate must be in [0, 1)");
  auto keep = std::make_shared<std::vector<std::uint8_t>>(a.numel());
  std::bernoulli_distribution coin(1.0 - static_cast<double>(rate));
  for (auto& k : *keep) k = coin(rng) ? 1 : 0;
  const T inv = T(1) / (T(1) - rate);
  const bool grad = wants_grad({&a});
  Tensor<T> out = output(a.shape(), grad);
  auto x = a.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = (*keep)[i] ? x[i] * inv : T(0);
  if (grad) {
    record(out, [=, a = a]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if ((*keep)[i]) ga[i] += g[i] * inv;
      }
    });
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace twopass
