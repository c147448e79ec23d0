#include "edje/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "edje/errors.hpp"

namespace edje {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;
using StridedC = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedM = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

MapC view(const Tensor& t) {
  return MapC(t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MapM view(Tensor& t) {
  return MapM(t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

Tape* common_tape(std::initializer_list<const Var*> vars) {
  Tape* tape = nullptr;
  for (const Var* v : vars) {
    if (!v->valid()) throw DimensionError("operation received an unset Var");
    if (!v->requires_grad()) continue;
    if (tape && v->tape() != tape) throw ConfigError("operands recorded on different tapes");
    tape = v->tape();
  }
  return tape;
}

Tape* common_tape(std::span<const Var> vars) {
  Tape* tape = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw DimensionError("operation received an unset Var");
    if (!v.requires_grad()) continue;
    if (tape && v.tape() != tape) throw ConfigError("operands recorded on different tapes");
    tape = v.tape();
  }
  return tape;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

using NodePtr = std::shared_ptr<detail::Node>;

void accumulate(const NodePtr& node, const Tensor& g) {
  if (!node->requires_grad) return;
  Tensor& dst = node->grad_buffer();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

Tensor one_element(double x) { return Tensor({1}, std::vector<double>{x}); }

double gelu_value(double x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  const double u = kC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  constexpr double kC = 0.7978845608028654;
  const double u = kC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * 0.044715 * x * x);
}

// Numerically stable softplus(-|z|) form of BCE; handles infinite logits.
double bce_term(double z, double y) {
  if (std::isinf(z)) {
    const double wrong = z > 0 ? 1.0 - y : y;
    return wrong == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void validate_layout(std::size_t q_rows, std::size_t kv_rows, std::size_t d, std::size_t heads,
                     const AttentionLayout& layout) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!layout.key_mask.empty() && layout.key_mask.size() != kv_rows) {
    throw DimensionError("attention key mask length " + std::to_string(layout.key_mask.size()) +
                         " != kv rows " + std::to_string(kv_rows));
  }
  for (const auto& s : layout.segments) {
    if (s.q_begin + s.q_rows > q_rows || s.kv_begin + s.kv_rows > kv_rows || s.kv_rows == 0) {
      throw DimensionError("attention segment out of range");
    }
  }
}

// Computes softmax(Q_h K_h^T * scale + mask) for one segment/head into `p`.
void segment_probs(const Tensor& q, const Tensor& k, const AttentionSegment& s, std::size_t head,
                   std::size_t hd, double scale, const std::vector<unsigned char>& mask,
                   RowMat& p) {
  const auto d = static_cast<Eigen::Index>(q.cols());
  StridedC qh(q.raw() + s.q_begin * q.cols() + head * hd, static_cast<Eigen::Index>(s.q_rows),
              static_cast<Eigen::Index>(hd), Eigen::OuterStride<>(d));
  StridedC kh(k.raw() + s.kv_begin * k.cols() + head * hd, static_cast<Eigen::Index>(s.kv_rows),
              static_cast<Eigen::Index>(hd), Eigen::OuterStride<>(d));
  p.noalias() = (qh * kh.transpose()) * scale;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any_key = false;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      if (!mask.empty() && !mask[s.kv_begin + static_cast<std::size_t>(c)]) {
        p(r, c) = -std::numeric_limits<double>::infinity();
        continue;
      }
      if (!std::isfinite(p(r, c))) throw NumericError("non-finite attention score");
      any_key = true;
      mx = std::max(mx, p(r, c));
    }
    if (!any_key) throw DimensionError("attention row with every key masked");
    double total = 0.0;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      p(r, c) = std::exp(p(r, c) - mx);
      total += p(r, c);
    }
    for (Eigen::Index c = 0; c < p.cols(); ++c) p(r, c) /= total;
  }
}

}  // namespace

Var make_var(std::shared_ptr<detail::Node> node, Tape* tape) {
  Var v;
  v.node_ = std::move(node);
  v.tape_ = tape;
  return v;
}

Var constant(Tensor value) {
  auto node = std::make_shared<detail::Node>();
  node->owned = std::move(value);
  return make_var(std::move(node), nullptr);
}

Var constant_ref(const Tensor& value) {
  auto node = std::make_shared<detail::Node>();
  node->external = &value;
  return make_var(std::move(node), nullptr);
}

Var Tape::param(const Parameter& p) {
  if (auto it = params_.find(&p); it != params_.end()) return it->second;
  auto node = std::make_shared<detail::Node>();
  node->external = &p.value;
  node->requires_grad = true;
  nodes_.push_back(node);
  Var v = make_var(std::move(node), this);
  params_.emplace(&p, v);
  return v;
}

Var Tape::input(Tensor value) {
  auto node = std::make_shared<detail::Node>();
  node->owned = std::move(value);
  node->requires_grad = true;
  nodes_.push_back(node);
  return make_var(std::move(node), this);
}

Var Tape::record(Tensor value, std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->owned = std::move(value);
  node->requires_grad = true;
  node->backward = std::move(backward);
  nodes_.push_back(node);
  return make_var(std::move(node), this);
}

void Tape::backward(const Var& loss) {
  if (done_) throw ConfigError("Tape::backward called twice");
  if (!loss.valid() || loss.value().size() != 1) {
    throw DimensionError("backward expects a one-element loss");
  }
  done_ = true;
  if (!loss.requires_grad() || loss.tape() != this) return;
  loss.node()->grad_buffer()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& node = **it;
    ++backward_visits_;
    if (node.backward && !node.grad.empty()) node.backward(node);
  }
}

const Tensor* Tape::grad(const Parameter& p) const {
  auto it = params_.find(&p);
  if (it == params_.end() || it->second.grad().empty()) return nullptr;
  return &it->second.grad();
}

Var bind(Tape* tape, const Parameter& p) { return tape ? tape->param(p) : constant_ref(p.value); }

double scalar(const Var& v) {
  if (v.value().size() != 1) throw DimensionError("scalar() on " + shape_string(v.value().shape()));
  return v.value()[0];
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows() || av.empty() || bv.empty()) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(av.shape()) + " * " +
                         shape_string(bv.shape()));
  }
  Tensor out({av.rows(), bv.cols()});
  view(out).noalias() = view(av) * view(bv);
  Tape* tape = common_tape({&a, &b});
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [na = a.node(), nb = b.node()](detail::Node& self) {
    const auto dc = view(std::as_const(self.grad));
    if (na->requires_grad) view(na->grad_buffer()).noalias() += dc * view(nb->value()).transpose();
    if (nb->requires_grad) view(nb->grad_buffer()).noalias() += view(na->value()).transpose() * dc;
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  Tape* tape = common_tape({&a, &b});
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [na = a.node(), nb = b.node()](detail::Node& self) {
    accumulate(na, self.grad);
    accumulate(nb, self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  Tape* tape = common_tape({&a, &b});
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [na = a.node(), nb = b.node()](detail::Node& self) {
    accumulate(na, self.grad);
    if (nb->requires_grad) {
      Tensor& g = nb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var hadamard(const Var& a, const Var& b) {
  require_same_shape("hadamard", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  Tape* tape = common_tape({&a, &b});
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [na = a.node(), nb = b.node()](detail::Node& self) {
    if (na->requires_grad) {
      Tensor& g = na->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb->value()[i];
    }
    if (nb->requires_grad) {
      Tensor& g = nb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na->value()[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (double& x : out.data()) x *= factor;
  Tape* tape = common_tape({&a});
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [na = a.node(), factor](detail::Node& self) {
    Tensor& g = na->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Var add_bias(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " vs input " +
                         shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = xv.rows(), d = xv.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bv[c];
  Tape* tape = common_tape({&x, &bias});
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [nx = x.node(), nb = bias.node(), n, d](detail::Node& self) {
    accumulate(nx, self.grad);
    if (nb->requires_grad) {
      Tensor& g = nb->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
    }
  });
}

Var linear(const Var& x, const Var& weight) { return matmul(x, weight); }

Var linear(const Var& x, const Var& weight, const Var& bias) {
  return add_bias(matmul(x, weight), bias);
}

Var row_softmax(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out = xv;
  const std::size_t n = xv.rows(), d = xv.cols();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) {
      if (std::isnan(v)) throw NumericError("row_softmax: NaN input in row " + std::to_string(r));
      mx = std::max(mx, v);
    }
    double total = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : row) v /= total;
  }
  Tape* tape = common_tape({&x});
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [nx = x.node(), n, d](detail::Node& self) {
    Tensor& g = nx->grad_buffer();
    const Tensor& y = self.value();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += self.grad[r * d + c] * y[r * d + c];
      for (std::size_t c = 0; c < d; ++c) {
        g[r * d + c] += y[r * d + c] * (self.grad[r * d + c] - dot);
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias length must equal width " + std::to_string(d));
  }
  Tensor normalized({n, d});
  std::vector<double> inv_std(n);
  Tensor out({n, d});
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xv[r * d + c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double z = xv[r * d + c] - mu;
      var += z * z;
    }
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (xv[r * d + c] - mu) * inv_std[r];
      normalized[r * d + c] = xh;
      out[r * d + c] = xh * gv[c] + bv[c];
    }
  }
  Tape* tape = common_tape({&x, &gain, &bias});
  if (!tape) return constant(std::move(out));
  return tape->record(
      std::move(out), [nx = x.node(), ng = gain.node(), nb = bias.node(), n, d,
                       normalized = std::move(normalized),
                       inv_std = std::move(inv_std)](detail::Node& self) {
        const Tensor& dy = self.grad;
        const Tensor& gv = ng->value();
        if (ng->requires_grad) {
          Tensor& g = ng->grad_buffer();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) g[c] += dy[r * d + c] * normalized[r * d + c];
        }
        if (nb->requires_grad) {
          Tensor& g = nb->grad_buffer();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) g[c] += dy[r * d + c];
        }
        if (nx->requires_grad) {
          Tensor& g = nx->grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = dy[r * d + c] * gv[c];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * normalized[r * d + c];
            }
            mean_dxh *= inv_d;
            mean_dxh_xh *= inv_d;
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = dy[r * d + c] * gv[c];
              g[r * d + c] +=
                  inv_std[r] * (dxh - mean_dxh - normalized[r * d + c] * mean_dxh_xh);
            }
          }
        }
      });
}

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = gelu_value(v);
  Tape* tape = common_tape({&x});
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [nx = x.node()](detail::Node& self) {
    Tensor& g = nx->grad_buffer();
    const Tensor& xv = nx->value();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * gelu_derivative(xv[i]);
  });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  Tensor out = x.value().rows_slice(begin, count);
  Tape* tape = common_tape({&x});
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [nx = x.node(), begin](detail::Node& self) {
    Tensor& g = nx->grad_buffer();
    const std::size_t offset = begin * g.cols();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
  });
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(rows[i]) + " out of range for " +
                           shape_string(xv.shape()));
    }
    std::copy_n(xv.raw() + rows[i] * d, d, out.raw() + i * d);
  }
  Tape* tape = common_tape({&x});
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [nx = x.node(), idx = std::vector<std::size_t>(
                                                          rows.begin(), rows.end()),
                                       d](detail::Node& self) {
    Tensor& g = nx->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) g[idx[i] * d + c] += self.grad[i * d + c];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const std::size_t d = parts.front().value().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != d) {
      throw DimensionError("concat_rows: width mismatch " + shape_string(p.value().shape()));
    }
    total += p.value().rows();
  }
  Tensor out({total, d});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.raw() + offset);
    offset += p.value().size();
  }
  Tape* tape = common_tape(parts);
  if (!tape) return constant(std::move(out));
  std::vector<NodePtr> nodes;
  nodes.reserve(parts.size());
  for (const Var& p : parts) nodes.push_back(p.node());
  return tape->record(std::move(out), [nodes = std::move(nodes)](detail::Node& self) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      const std::size_t count = n->value().size();
      if (n->requires_grad) {
        Tensor& g = n->grad_buffer();
        for (std::size_t i = 0; i < count; ++i) g[i] += self.grad[offset + i];
      }
      offset += count;
    }
  });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  Tape* tape = common_tape({&x});
  if (!tape) return constant(one_element(total));
  return tape->record(one_element(total), [nx = x.node()](detail::Node& self) {
    Tensor& g = nx->grad_buffer();
    for (double& v : g.data()) v += self.grad[0];
  });
}

Var mean(const Var& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

AttentionLayout AttentionLayout::single(std::size_t q_rows, std::size_t kv_rows) {
  AttentionLayout layout;
  layout.segments.push_back({0, q_rows, 0, kv_rows});
  return layout;
}

std::vector<Tensor> attention_probabilities(const Tensor& q, const Tensor& k, std::size_t heads,
                                            const AttentionLayout& layout) {
  const std::size_t d = q.cols();
  validate_layout(q.rows(), k.rows(), d, heads, layout);
  const std::size_t hd = d / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> out;
  RowMat p;
  for (const auto& s : layout.segments) {
    for (std::size_t h = 0; h < heads; ++h) {
      p.resize(static_cast<Eigen::Index>(s.q_rows), static_cast<Eigen::Index>(s.kv_rows));
      segment_probs(q, k, s, h, hd, scale_factor, layout.key_mask, p);
      Tensor t({s.q_rows, s.kv_rows});
      view(t) = p;
      out.push_back(std::move(t));
    }
  }
  return out;
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
              const AttentionLayout& layout) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows()) {
    throw DimensionError("attention: q " + shape_string(qv.shape()) + ", k " +
                         shape_string(kv.shape()) + ", v " + shape_string(vv.shape()));
  }
  validate_layout(qv.rows(), kv.rows(), d, heads, layout);
  const std::size_t hd = d / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(hd));
  std::size_t out_rows = 0;
  for (const auto& s : layout.segments) out_rows += s.q_rows;
  if (out_rows == 0) throw DimensionError("attention: no query rows");

  Tape* tape = common_tape({&q, &k, &v});
  Tensor out({out_rows, d});
  std::vector<RowMat> saved;
  if (tape) saved.reserve(layout.segments.size() * heads);
  RowMat p;
  const auto di = static_cast<Eigen::Index>(d);
  std::size_t out_row = 0;
  for (const auto& s : layout.segments) {
    for (std::size_t h = 0; h < heads; ++h) {
      p.resize(static_cast<Eigen::Index>(s.q_rows), static_cast<Eigen::Index>(s.kv_rows));
      segment_probs(qv, kv, s, h, hd, scale_factor, layout.key_mask, p);
      StridedC vh(vv.raw() + s.kv_begin * d + h * hd, static_cast<Eigen::Index>(s.kv_rows),
                  static_cast<Eigen::Index>(hd), Eigen::OuterStride<>(di));
      StridedM oh(out.raw() + out_row * d + h * hd, static_cast<Eigen::Index>(s.q_rows),
                  static_cast<Eigen::Index>(hd), Eigen::OuterStride<>(di));
      oh.noalias() = p * vh;
      if (tape) saved.push_back(p);
    }
    out_row += s.q_rows;
  }
  if (!tape) return constant(std::move(out));
  return tape->record(std::move(out), [nq = q.node(), nk = k.node(), nv = v.node(),
                                       segments = layout.segments, saved = std::move(saved),
                                       heads, hd, d, scale_factor](detail::Node& self) {
    const Tensor& qv = nq->value();
    const Tensor& kv = nk->value();
    const Tensor& vv = nv->value();
    const auto di = static_cast<Eigen::Index>(d);
    const auto hdi = static_cast<Eigen::Index>(hd);
    Tensor* dq = nq->requires_grad ? &nq->grad_buffer() : nullptr;
    Tensor* dk = nk->requires_grad ? &nk->grad_buffer() : nullptr;
    Tensor* dv = nv->requires_grad ? &nv->grad_buffer() : nullptr;
    RowMat dp, ds;
    std::size_t out_row = 0, index = 0;
    for (const auto& s : segments) {
      const auto qr = static_cast<Eigen::Index>(s.q_rows);
      const auto kr = static_cast<Eigen::Index>(s.kv_rows);
      for (std::size_t h = 0; h < heads; ++h, ++index) {
        const RowMat& p = saved[index];
        StridedC doh(self.grad.raw() + out_row * d + h * hd, qr, hdi, Eigen::OuterStride<>(di));
        StridedC vh(vv.raw() + s.kv_begin * d + h * hd, kr, hdi, Eigen::OuterStride<>(di));
        StridedC qh(qv.raw() + s.q_begin * d + h * hd, qr, hdi, Eigen::OuterStride<>(di));
        StridedC kh(kv.raw() + s.kv_begin * d + h * hd, kr, hdi, Eigen::OuterStride<>(di));
        if (dv) {
          StridedM dvh(dv->raw() + s.kv_begin * d + h * hd, kr, hdi, Eigen::OuterStride<>(di));
          dvh.noalias() += p.transpose() * doh;
        }
        if (!dq && !dk) continue;
        dp.noalias() = doh * vh.transpose();
        ds.resize(qr, kr);
        for (Eigen::Index r = 0; r < qr; ++r) {
          const double dot = p.row(r).dot(dp.row(r));
          for (Eigen::Index c = 0; c < kr; ++c) {
            ds(r, c) = p(r, c) * (dp(r, c) - dot) * scale_factor;
          }
        }
        if (dq) {
          StridedM dqh(dq->raw() + s.q_begin * d + h * hd, qr, hdi, Eigen::OuterStride<>(di));
          dqh.noalias() += ds * kh;
        }
        if (dk) {
          StridedM dkh(dk->raw() + s.kv_begin * d + h * hd, kr, hdi, Eigen::OuterStride<>(di));
          dkh.noalias() += ds.transpose() * qh;
        }
      }
      out_row += s.q_rows;
    }
  });
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
                         const AttentionLayout& layout, const Var& w_out, const Var* b_out) {
  Var h = attention(q, k, v, heads, layout);
  return b_out ? linear(h, w_out, *b_out) : linear(h, w_out);
}

Var bce_with_logits(const Var& logits, std::span<const double> targets) {
  const Tensor& z = logits.value();
  if (z.size() != targets.size() || z.empty()) {
    throw DimensionError("bce_with_logits: " + std::to_string(z.size()) + " logits vs " +
                         std::to_string(targets.size()) + " targets");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += bce_term(z[i], targets[i]);
  const double n = static_cast<double>(z.size());
  Tape* tape = common_tape({&logits});
  if (!tape) return constant(one_element(total / n));
  return tape->record(one_element(total / n),
                      [nz = logits.node(), y = std::vector<double>(targets.begin(), targets.end()),
                       n](detail::Node& self) {
                        Tensor& g = nz->grad_buffer();
                        const Tensor& z = nz->value();
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] += self.grad[0] * (sigmoid(z[i]) - y[i]) / n;
                        }
                      });
}

Var cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
  const Tensor& z = logits.value();
  const std::size_t n = z.rows(), c = z.cols();
  if (n != targets.size() || n == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(n) + " rows vs " +
                         std::to_string(targets.size()) + " targets");
  }
  Tensor probs({n, c});
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= c) throw DimensionError("cross_entropy: target id out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, z[r * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[r * c + j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(z[r * c + j] - mx) / s;
    total += mx + std::log(s) - z[r * c + targets[r]];
  }
  Tape* tape = common_tape({&logits});
  const double inv_n = 1.0 / static_cast<double>(n);
  if (!tape) return constant(one_element(total * inv_n));
  return tape->record(one_element(total * inv_n),
                      [nz = logits.node(), probs = std::move(probs),
                       t = std::vector<std::size_t>(targets.begin(), targets.end()), c,
                       inv_n](detail::Node& self) {
                        Tensor& g = nz->grad_buffer();
                        const double up = self.grad[0] * inv_n;
                        for (std::size_t r = 0; r < t.size(); ++r) {
                          for (std::size_t j = 0; j < c; ++j) {
                            g[r * c + j] += up * (probs[r * c + j] - (j == t[r] ? 1.0 : 0.0));
                          }
                        }
                      });
}

Var cosine_distance(const Var& pred, const Tensor& target, double eps) {
  const Tensor& p = pred.value();
  if (p.rows() != target.rows() || p.cols() != target.cols() || p.empty()) {
    throw DimensionError("cosine_distance: " + shape_string(p.shape()) + " vs " +
                         shape_string(target.shape()));
  }
  const std::size_t n = p.rows(), d = p.cols();
  std::vector<double> pn(n), tn(n), dots(n);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double pp = 0.0, tt = 0.0, pt = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      pp += p[r * d + c] * p[r * d + c];
      tt += target[r * d + c] * target[r * d + c];
      pt += p[r * d + c] * target[r * d + c];
    }
    pn[r] = std::max(std::sqrt(pp), eps);
    tn[r] = std::max(std::sqrt(tt), eps);
    dots[r] = pt;
    total += 1.0 - pt / (pn[r] * tn[r]);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  Tape* tape = common_tape({&pred});
  if (!tape) return constant(one_element(total * inv_n));
  return tape->record(one_element(total * inv_n), [np = pred.node(), target, pn = std::move(pn),
                                                   tn = std::move(tn), dots = std::move(dots), n, d,
                                                   eps, inv_n](detail::Node& self) {
    Tensor& g = np->grad_buffer();
    const Tensor& p = np->value();
    const double up = self.grad[0] * inv_n;
    for (std::size_t r = 0; r < n; ++r) {
      const double denom = pn[r] * tn[r];
      // The norm floor is locally constant, so only the unfloored branch
      // carries the quotient-rule term.
      const bool floored = pn[r] <= eps;
      for (std::size_t c = 0; c < d; ++c) {
        double dcos = target[r * d + c] / denom;
        if (!floored) dcos -= dots[r] * p[r * d + c] / (pn[r] * pn[r] * denom);
        g[r * d + c] -= up * dcos;
      }
    }
  });
}

}  // namespace edje
