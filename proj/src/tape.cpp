#include "alertgraph/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace alertgraph::nn {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

CMap mat(const Tensor& t, std::size_t r, std::size_t c) { return CMap(t.data(), r, c); }
Map mat(Tensor& t, std::size_t r, std::size_t c) { return Map(t.data(), r, c); }

void check_rank2(const Tensor& t, const char* who) {
  if (t.rank() != 2) throw std::invalid_argument(std::string(who) + ": expected rank-2 tensor, got " + t.shape_str());
}

}  // namespace

InAdjacency InAdjacency::from_edges(std::size_t n_nodes,
                                    const std::vector<std::pair<std::uint32_t, std::uint32_t>>& edges) {
  InAdjacency adj;
  adj.n_nodes = n_nodes;
  adj.in_offsets.assign(n_nodes + 1, 0);
  for (const auto& [u, v] : edges) {
    if (u >= n_nodes || v >= n_nodes) throw std::invalid_argument("adjacency: edge endpoint out of range");
    ++adj.in_offsets[v + 1];
  }
  for (std::size_t v = 0; v < n_nodes; ++v) adj.in_offsets[v + 1] += adj.in_offsets[v];
  adj.in_list.resize(edges.size());
  std::vector<std::uint32_t> cursor(adj.in_offsets.begin(), adj.in_offsets.end() - 1);
  for (const auto& [u, v] : edges) adj.in_list[cursor[v]++] = u;
  return adj;
}

Tensor& ensure_grad(Tape::Node* n) {
  if (n->grad.empty()) n->grad = Tensor::zeros(n->value.shape());
  return n->grad;
}

Tape::Node* Tape::make(Tensor value, bool needs, std::function<void(Tape&, Node&)> bp) {
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  node->needs_grad = grad_ && needs;
  if (node->needs_grad) node->backprop = std::move(bp);
  nodes_.push_back(std::move(node));
  return nodes_.back().get();
}

bool Tape::owns(const Node* n) const {
  for (const auto& p : nodes_)
    if (p.get() == n) return true;
  return false;
}

Tape::Node* Tape::leaf(Tensor t) { return make(std::move(t), false, nullptr); }

Tape::Node* Tape::param(Parameter& p) {
  Node* n = make(p.value, !p.frozen, nullptr);
  if (n->needs_grad) {
    n->bound = &p;
    n->backprop = [](Tape&, Node& self) {
      Parameter& prm = *self.bound;
      for (std::size_t i = 0; i < self.grad.numel(); ++i) prm.grad[i] += self.grad[i];
      prm.grad_seen = true;
    };
  }
  return n;
}

Tape::Node* Tape::add(Node* a, Node* b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make(std::move(out), a->needs_grad || b->needs_grad, [a, b](Tape&, Node& self) {
    if (a->needs_grad) {
      Tensor& ga = ensure_grad(a);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
    }
    if (b->needs_grad) {
      Tensor& gb = ensure_grad(b);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += self.grad[i];
    }
  });
}

Tape::Node* Tape::add_const(Node* a, const Tensor& c) {
  if (!a->value.same_shape(c)) throw std::invalid_argument("add_const: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c[i];
  return make(std::move(out), a->needs_grad, [a](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
  });
}

Tape::Node* Tape::scale(Node* a, double c) {
  Tensor out = a->value;
  for (auto& v : out.values()) v *= c;
  return make(std::move(out), a->needs_grad, [a, c](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += c * self.grad[i];
  });
}

Tape::Node* Tape::relu(Node* a) {
  Tensor out = a->value;
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make(std::move(out), a->needs_grad, [a](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < ga.numel(); ++i)
      if (self.value[i] > 0.0) ga[i] += self.grad[i];
  });
}

Tape::Node* Tape::sigmoid(Node* a) {
  Tensor out = a->value;
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return make(std::move(out), a->needs_grad, [a](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      double y = self.value[i];
      ga[i] += y * (1.0 - y) * self.grad[i];
    }
  });
}

Tape::Node* Tape::clamp(Node* a, double lo, double hi) {
  Tensor out = a->value;
  for (auto& v : out.values()) v = std::min(hi, std::max(lo, v));
  return make(std::move(out), a->needs_grad, [a, lo, hi](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      double x = a->value[i];
      if (x > lo && x < hi) ga[i] += self.grad[i];
    }
  });
}

Tape::Node* Tape::reshape(Node* a, std::vector<std::size_t> shape) {
  Tensor out(std::move(shape), a->value.values());
  return make(std::move(out), a->needs_grad, [a](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
  });
}

Tape::Node* Tape::flatten(Node* a) { return reshape(a, {a->value.numel()}); }

Tape::Node* Tape::slice_rows(Node* a, std::size_t r0, std::size_t r1) {
  check_rank2(a->value, "slice_rows");
  std::size_t c = a->value.cols();
  if (r1 > a->value.rows() || r0 > r1) throw std::invalid_argument("slice_rows: bad range");
  Tensor out({r1 - r0, c});
  std::copy(a->value.data() + r0 * c, a->value.data() + r1 * c, out.data());
  return make(std::move(out), a->needs_grad, [a, r0, c](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < self.grad.numel(); ++i) ga[r0 * c + i] += self.grad[i];
  });
}

Tape::Node* Tape::slice_cols(Node* a, std::size_t c0, std::size_t c1) {
  check_rank2(a->value, "slice_cols");
  std::size_t r = a->value.rows(), c = a->value.cols();
  if (c1 > c || c0 > c1) throw std::invalid_argument("slice_cols: bad range");
  Tensor out({r, c1 - c0});
  for (std::size_t i = 0; i < r; ++i)
    std::copy(a->value.data() + i * c + c0, a->value.data() + i * c + c1, out.data() + i * (c1 - c0));
  return make(std::move(out), a->needs_grad, [a, c0, c1, c](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    std::size_t w = c1 - c0;
    for (std::size_t i = 0; i < self.grad.rows(); ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * c + c0 + j] += self.grad[i * w + j];
  });
}

Tape::Node* Tape::pad_rows_top(Node* a, std::size_t total_rows) {
  check_rank2(a->value, "pad_rows_top");
  std::size_t r = a->value.rows(), c = a->value.cols();
  if (total_rows < r) throw std::invalid_argument("pad_rows_top: target smaller than input");
  Tensor out({total_rows, c});
  std::size_t off = (total_rows - r) * c;
  std::copy(a->value.data(), a->value.data() + r * c, out.data() + off);
  return make(std::move(out), a->needs_grad, [a, off](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[off + i];
  });
}

Tape::Node* Tape::zero_rows_before(Node* a, std::size_t first_valid) {
  check_rank2(a->value, "zero_rows_before");
  std::size_t c = a->value.cols();
  Tensor out = a->value;
  std::fill(out.data(), out.data() + std::min(first_valid, out.rows()) * c, 0.0);
  return make(std::move(out), a->needs_grad, [a, first_valid, c](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    std::size_t start = std::min(first_valid, self.grad.rows()) * c;
    for (std::size_t i = start; i < ga.numel(); ++i) ga[i] += self.grad[i];
  });
}

Tape::Node* Tape::concat_rows(const std::vector<Node*>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  std::size_t c = parts[0]->value.cols(), r = 0;
  bool needs = false;
  for (Node* p : parts) {
    check_rank2(p->value, "concat_rows");
    if (p->value.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
    r += p->value.rows();
    needs = needs || p->needs_grad;
  }
  Tensor out({r, c});
  std::size_t off = 0;
  for (Node* p : parts) {
    std::copy(p->value.data(), p->value.data() + p->value.numel(), out.data() + off);
    off += p->value.numel();
  }
  return make(std::move(out), needs, [parts](Tape&, Node& self) {
    std::size_t off = 0;
    for (Node* p : parts) {
      std::size_t n = p->value.numel();
      if (p->needs_grad) {
        Tensor& gp = ensure_grad(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

Tape::Node* Tape::concat_cols(const std::vector<Node*>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  std::size_t r = parts[0]->value.rows(), c = 0;
  bool needs = false;
  for (Node* p : parts) {
    check_rank2(p->value, "concat_cols");
    if (p->value.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
    c += p->value.cols();
    needs = needs || p->needs_grad;
  }
  Tensor out({r, c});
  std::size_t coff = 0;
  for (Node* p : parts) {
    std::size_t pc = p->value.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy(p->value.data() + i * pc, p->value.data() + (i + 1) * pc, out.data() + i * c + coff);
    coff += pc;
  }
  return make(std::move(out), needs, [parts, c](Tape&, Node& self) {
    std::size_t coff = 0;
    std::size_t r = self.grad.rows();
    for (Node* p : parts) {
      std::size_t pc = p->value.cols();
      if (p->needs_grad) {
        Tensor& gp = ensure_grad(p);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += self.grad[i * c + coff + j];
      }
      coff += pc;
    }
  });
}

Tape::Node* Tape::stack_channels(const std::vector<Node*>& channels) {
  if (channels.empty()) throw std::invalid_argument("stack_channels: empty");
  std::size_t h = channels[0]->value.rows(), w = channels[0]->value.cols();
  bool needs = false;
  for (Node* ch : channels) {
    check_rank2(ch->value, "stack_channels");
    if (ch->value.rows() != h || ch->value.cols() != w)
      throw std::invalid_argument("stack_channels: shape mismatch");
    needs = needs || ch->needs_grad;
  }
  Tensor out({channels.size(), h, w});
  std::size_t plane = h * w, off = 0;
  for (Node* ch : channels) {
    std::copy(ch->value.data(), ch->value.data() + plane, out.data() + off);
    off += plane;
  }
  return make(std::move(out), needs, [channels, plane](Tape&, Node& self) {
    std::size_t off = 0;
    for (Node* ch : channels) {
      if (ch->needs_grad) {
        Tensor& g = ensure_grad(ch);
        for (std::size_t i = 0; i < plane; ++i) g[i] += self.grad[off + i];
      }
      off += plane;
    }
  });
}

Tape::Node* Tape::matmul(Node* a, Node* b) {
  check_rank2(a->value, "matmul");
  check_rank2(b->value, "matmul");
  std::size_t m = a->value.rows(), k = a->value.cols(), n = b->value.cols();
  if (b->value.rows() != k) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tensor out({m, n});
  mat(out, m, n).noalias() = mat(a->value, m, k) * mat(b->value, k, n);
  return make(std::move(out), a->needs_grad || b->needs_grad, [a, b, m, k, n](Tape&, Node& self) {
    CMap gy(self.grad.data(), m, n);
    if (a->needs_grad) {
      Tensor& ga = ensure_grad(a);
      mat(ga, m, k).noalias() += gy * mat(b->value, k, n).transpose();
    }
    if (b->needs_grad) {
      Tensor& gb = ensure_grad(b);
      mat(gb, k, n).noalias() += mat(a->value, m, k).transpose() * gy;
    }
  });
}

Tape::Node* Tape::transpose(Node* a) {
  check_rank2(a->value, "transpose");
  std::size_t r = a->value.rows(), c = a->value.cols();
  Tensor out({c, r});
  mat(out, c, r).noalias() = mat(a->value, r, c).transpose();
  return make(std::move(out), a->needs_grad, [a, r, c](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    mat(ga, r, c).noalias() += CMap(self.grad.data(), c, r).transpose();
  });
}

Tape::Node* Tape::add_row_bias(Node* x, Node* b) {
  check_rank2(x->value, "add_row_bias");
  std::size_t r = x->value.rows(), c = x->value.cols();
  if (b->value.numel() != c) throw std::invalid_argument("add_row_bias: bias size mismatch");
  Tensor out = x->value;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b->value[j];
  return make(std::move(out), x->needs_grad || b->needs_grad, [x, b, r, c](Tape&, Node& self) {
    if (x->needs_grad) {
      Tensor& gx = ensure_grad(x);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += self.grad[i];
    }
    if (b->needs_grad) {
      Tensor& gb = ensure_grad(b);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += self.grad[i * c + j];
    }
  });
}

Tape::Node* Tape::linear(Node* x, Node* W, Node* b) {
  check_rank2(x->value, "linear");
  check_rank2(W->value, "linear");
  std::size_t n = x->value.rows(), in = x->value.cols(), out_dim = W->value.rows();
  if (W->value.cols() != in) throw std::invalid_argument("linear: weight/input mismatch");
  if (b && b->value.numel() != out_dim) throw std::invalid_argument("linear: bias size mismatch");
  Tensor out({n, out_dim});
  mat(out, n, out_dim).noalias() = mat(x->value, n, in) * mat(W->value, out_dim, in).transpose();
  if (b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += b->value[j];
  bool needs = x->needs_grad || W->needs_grad || (b && b->needs_grad);
  return make(std::move(out), needs, [x, W, b, n, in, out_dim](Tape&, Node& self) {
    CMap gy(self.grad.data(), n, out_dim);
    if (x->needs_grad) {
      Tensor& gx = ensure_grad(x);
      mat(gx, n, in).noalias() += gy * mat(W->value, out_dim, in);
    }
    if (W->needs_grad) {
      Tensor& gW = ensure_grad(W);
      mat(gW, out_dim, in).noalias() += gy.transpose() * mat(x->value, n, in);
    }
    if (b && b->needs_grad) {
      Tensor& gb = ensure_grad(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out_dim; ++j) gb[j] += self.grad[i * out_dim + j];
    }
  });
}

Tape::Node* Tape::perceptron(Node* x, Node* W, Node* b) {
  check_rank2(x->value, "perceptron");
  std::size_t n = x->value.rows(), in = x->value.cols(), out_dim = W->value.rows();
  if (W->value.cols() != in) throw std::invalid_argument("perceptron: weight/input mismatch");
  Tensor out({n, out_dim});
  mat(out, n, out_dim).noalias() = mat(x->value, n, in) * mat(W->value, out_dim, in).transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out_dim; ++j) {
      double& v = out[i * out_dim + j];
      v += b->value[j];
      if (v < 0.0) v = 0.0;
    }
  bool needs = x->needs_grad || W->needs_grad || b->needs_grad;
  return make(std::move(out), needs, [x, W, b, n, in, out_dim](Tape&, Node& self) {
    // d(pre-activation) = upstream masked by the stored post-relu output
    Tensor dpre({n, out_dim});
    for (std::size_t i = 0; i < dpre.numel(); ++i) dpre[i] = self.value[i] > 0.0 ? self.grad[i] : 0.0;
    CMap gp(dpre.data(), n, out_dim);
    if (x->needs_grad) {
      Tensor& gx = ensure_grad(x);
      mat(gx, n, in).noalias() += gp * mat(W->value, out_dim, in);
    }
    if (W->needs_grad) {
      Tensor& gW = ensure_grad(W);
      mat(gW, out_dim, in).noalias() += gp.transpose() * mat(x->value, n, in);
    }
    if (b->needs_grad) {
      Tensor& gb = ensure_grad(b);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out_dim; ++j) gb[j] += dpre[i * out_dim + j];
    }
  });
}

Tape::Node* Tape::sum_rows(Node* a) {
  check_rank2(a->value, "sum_rows");
  std::size_t r = a->value.rows(), c = a->value.cols();
  Tensor out({c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a->value[i * c + j];
  return make(std::move(out), a->needs_grad, [a, r, c](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j];
  });
}

Tape::Node* Tape::mean_rows(Node* a) {
  check_rank2(a->value, "mean_rows");
  std::size_t r = a->value.rows(), c = a->value.cols();
  if (r == 0) throw std::invalid_argument("mean_rows: empty input");
  Tensor out({c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a->value[i * c + j];
  for (auto& v : out.values()) v /= static_cast<double>(r);
  return make(std::move(out), a->needs_grad, [a, r, c](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    double inv = 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j] * inv;
  });
}

Tape::Node* Tape::mean_all(Node* a) {
  std::size_t n = a->value.numel();
  if (n == 0) throw std::invalid_argument("mean_all: empty input");
  double s = 0.0;
  for (double v : a->value.values()) s += v;
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  return make(std::move(out), a->needs_grad, [a, n](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

Tape::Node* Tape::softmax_rows(Node* a) {
  check_rank2(a->value, "softmax_rows");
  std::size_t r = a->value.rows(), c = a->value.cols();
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a->value.data() + i * c;
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = std::exp(x[j] - mx) / z;
  }
  return make(std::move(out), a->needs_grad, [a, r, c](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.value.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tape::Node* Tape::log_softmax_rows(Node* a) {
  check_rank2(a->value, "log_softmax_rows");
  std::size_t r = a->value.rows(), c = a->value.cols();
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = a->value.data() + i * c;
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[j] - lse;
  }
  return make(std::move(out), a->needs_grad, [a, r, c](Tape&, Node& self) {
    Tensor& ga = ensure_grad(a);
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.value.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += gy[j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gy[j] - std::exp(y[j]) * gsum;
    }
  });
}

Tape::Node* Tape::layer_norm(Node* x, Node* gamma, Node* beta, double eps) {
  check_rank2(x->value, "layer_norm");
  std::size_t r = x->value.rows(), c = x->value.cols();
  if (gamma->value.numel() != c || beta->value.numel() != c)
    throw std::invalid_argument("layer_norm: affine parameter size mismatch");
  Tensor out({r, c});
  auto stats = std::make_shared<std::vector<double>>(2 * r);  // mean, inv_std per row
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x->value.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(c);
    double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[2 * i] = mu;
    (*stats)[2 * i + 1] = inv;
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = gamma->value[j] * (xi[j] - mu) * inv + beta->value[j];
  }
  bool needs = x->needs_grad || gamma->needs_grad || beta->needs_grad;
  return make(std::move(out), needs, [x, gamma, beta, r, c, stats](Tape&, Node& self) {
    for (std::size_t i = 0; i < r; ++i) {
      const double* xi = x->value.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      double mu = (*stats)[2 * i], inv = (*stats)[2 * i + 1];
      if (gamma->needs_grad) {
        Tensor& gg = ensure_grad(gamma);
        for (std::size_t j = 0; j < c; ++j) gg[j] += gy[j] * (xi[j] - mu) * inv;
      }
      if (beta->needs_grad) {
        Tensor& gb = ensure_grad(beta);
        for (std::size_t j = 0; j < c; ++j) gb[j] += gy[j];
      }
      if (x->needs_grad) {
        Tensor& gx = ensure_grad(x);
        // dL/dxhat and its row statistics
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          double dxh = gy[j] * gamma->value[j];
          s1 += dxh;
          s2 += dxh * (xi[j] - mu) * inv;
        }
        double cn = static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          double dxh = gy[j] * gamma->value[j];
          double xh = (xi[j] - mu) * inv;
          gx[i * c + j] += inv * (dxh - s1 / cn - xh * s2 / cn);
        }
      }
    }
  });
}

Tape::Node* Tape::l2_normalize_vec(Node* a) {
  std::size_t n = a->value.numel();
  if (n == 0) throw std::invalid_argument("l2_normalize: empty input");
  double norm2 = 0.0;
  for (double v : a->value.values()) norm2 += v * v;
  double norm = std::sqrt(norm2);
  Tensor out = a->value;
  bool degenerate = norm < 1e-12;
  if (degenerate) {
    ++degenerate_norm_events;
    for (auto& v : out.values()) v = 0.0;
    out[0] = 1.0;
  } else {
    for (auto& v : out.values()) v /= norm;
  }
  return make(std::move(out), a->needs_grad, [a, norm, degenerate, n](Tape&, Node& self) {
    if (degenerate) return;  // constant fallback, no gradient
    Tensor& ga = ensure_grad(a);
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += self.value[i] * self.grad[i];
    for (std::size_t i = 0; i < n; ++i) ga[i] += (self.grad[i] - self.value[i] * dot) / norm;
  });
}

Tape::Node* Tape::gin_aggregate(Node* h, Node* eps, std::shared_ptr<const InAdjacency> adj) {
  check_rank2(h->value, "gin_aggregate");
  std::size_t n = h->value.rows(), d = h->value.cols();
  if (n == 0) throw std::invalid_argument("gin_aggregate: empty snapshot");
  if (adj->n_nodes != n) throw std::invalid_argument("gin_aggregate: adjacency/node count mismatch");
  double e = eps ? eps->value[0] : 0.0;
  Tensor out({n, d});
  for (std::size_t v = 0; v < n; ++v) {
    double* ov = out.data() + v * d;
    const double* hv = h->value.data() + v * d;
    for (std::size_t j = 0; j < d; ++j) ov[j] = (1.0 + e) * hv[j];
    for (std::uint32_t k = adj->in_offsets[v]; k < adj->in_offsets[v + 1]; ++k) {
      const double* hu = h->value.data() + adj->in_list[k] * d;
      for (std::size_t j = 0; j < d; ++j) ov[j] += hu[j];
    }
  }
  bool needs = h->needs_grad || (eps && eps->needs_grad);
  return make(std::move(out), needs, [h, eps, adj, n, d, e](Tape&, Node& self) {
    if (h->needs_grad) {
      Tensor& gh = ensure_grad(h);
      for (std::size_t v = 0; v < n; ++v) {
        const double* gv = self.grad.data() + v * d;
        double* ghv = gh.data() + v * d;
        for (std::size_t j = 0; j < d; ++j) ghv[j] += (1.0 + e) * gv[j];
        for (std::uint32_t k = adj->in_offsets[v]; k < adj->in_offsets[v + 1]; ++k) {
          double* ghu = gh.data() + adj->in_list[k] * d;
          for (std::size_t j = 0; j < d; ++j) ghu[j] += gv[j];
        }
      }
    }
    if (eps && eps->needs_grad) {
      Tensor& ge = ensure_grad(eps);
      double acc = 0.0;
      for (std::size_t i = 0; i < n * d; ++i) acc += h->value[i] * self.grad[i];
      ge[0] += acc;
    }
  });
}

Tape::Node* Tape::conv2d_3x3(Node* x, Node* k, Node* b) {
  if (x->value.rank() != 3) throw std::invalid_argument("conv2d: expected {C,H,W} input");
  if (k->value.rank() != 4 || k->value.dim(2) != 3 || k->value.dim(3) != 3)
    throw std::invalid_argument("conv2d: expected {O,C,3,3} kernel");
  std::size_t C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  std::size_t O = k->value.dim(0);
  if (k->value.dim(1) != C) throw std::invalid_argument("conv2d: channel mismatch");
  if (b->value.numel() != O) throw std::invalid_argument("conv2d: bias size mismatch");

  // im2col with zero padding 1: col is {C*9, H*W}
  std::size_t hw = H * W, ck = C * 9;
  auto col = std::make_shared<Tensor>(std::vector<std::size_t>{ck, hw});
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = x->value.data() + c * hw;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        double* row = col->data() + (c * 9 + static_cast<std::size_t>((dy + 1) * 3 + (dx + 1))) * hw;
        for (std::size_t y = 0; y < H; ++y) {
          long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          for (std::size_t xcol = 0; xcol < W; ++xcol) {
            long sx = static_cast<long>(xcol) + dx;
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            row[y * W + xcol] = plane[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)];
          }
        }
      }
  }
  Tensor out({O, H, W});
  mat(out, O, hw).noalias() = CMap(k->value.data(), O, ck) * CMap(col->data(), ck, hw);
  for (std::size_t o = 0; o < O; ++o) {
    double* plane = out.data() + o * hw;
    for (std::size_t i = 0; i < hw; ++i) plane[i] += b->value[o];
  }
  bool needs = x->needs_grad || k->needs_grad || b->needs_grad;
  return make(std::move(out), needs, [x, k, b, col, C, H, W, O, hw, ck](Tape&, Node& self) {
    CMap gy(self.grad.data(), O, hw);
    if (k->needs_grad) {
      Tensor& gk = ensure_grad(k);
      Map(gk.data(), O, ck).noalias() += gy * CMap(col->data(), ck, hw).transpose();
    }
    if (b->needs_grad) {
      Tensor& gb = ensure_grad(b);
      for (std::size_t o = 0; o < O; ++o) {
        double s = 0.0;
        const double* plane = self.grad.data() + o * hw;
        for (std::size_t i = 0; i < hw; ++i) s += plane[i];
        gb[o] += s;
      }
    }
    if (x->needs_grad) {
      Tensor dcol({ck, hw});
      Map(dcol.data(), ck, hw).noalias() = CMap(k->value.data(), O, ck).transpose() * gy;
      Tensor& gx = ensure_grad(x);
      for (std::size_t c = 0; c < C; ++c) {
        double* plane = gx.data() + c * hw;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const double* row =
                dcol.data() + (c * 9 + static_cast<std::size_t>((dy + 1) * 3 + (dx + 1))) * hw;
            for (std::size_t y = 0; y < H; ++y) {
              long sy = static_cast<long>(y) + dy;
              if (sy < 0 || sy >= static_cast<long>(H)) continue;
              for (std::size_t xcol = 0; xcol < W; ++xcol) {
                long sx = static_cast<long>(xcol) + dx;
                if (sx < 0 || sx >= static_cast<long>(W)) continue;
                plane[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)] += row[y * W + xcol];
              }
            }
          }
      }
    }
  });
}

Tape::Node* Tape::maxpool2(Node* x) {
  if (x->value.rank() != 3) throw std::invalid_argument("maxpool2: expected {C,H,W} input");
  std::size_t C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
  if (H % 2 || W % 2) throw std::invalid_argument("maxpool2: H and W must be even");
  std::size_t oh = H / 2, ow = W / 2;
  Tensor out({C, oh, ow});
  auto arg = std::make_shared<std::vector<std::uint32_t>>(C * oh * ow);
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = x->value.data() + c * H * W;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xc = 0; xc < ow; ++xc) {
        std::size_t base = (2 * y) * W + 2 * xc;
        std::size_t best = base;
        double bv = plane[base];
        for (std::size_t q = 1; q < 4; ++q) {
          std::size_t idx = base + (q / 2) * W + (q % 2);
          if (plane[idx] > bv) {
            bv = plane[idx];
            best = idx;
          }
        }
        out[c * oh * ow + y * ow + xc] = bv;
        (*arg)[c * oh * ow + y * ow + xc] = static_cast<std::uint32_t>(best);
      }
  }
  return make(std::move(out), x->needs_grad, [x, arg, C, H, W, oh, ow](Tape&, Node& self) {
    Tensor& gx = ensure_grad(x);
    for (std::size_t c = 0; c < C; ++c) {
      double* plane = gx.data() + c * H * W;
      for (std::size_t i = 0; i < oh * ow; ++i)
        plane[(*arg)[c * oh * ow + i]] += self.grad[c * oh * ow + i];
    }
  });
}

Tape::Node* Tape::lincomb2(Node* a, Node* b, Node* alpha, std::size_t out_row) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("lincomb2: shape mismatch");
  if (alpha->value.rank() != 2 || alpha->value.rows() != 2 || alpha->value.cols() != 2)
    throw std::invalid_argument("lincomb2: alpha must be 2x2");
  double ca = alpha->value[out_row * 2], cb = alpha->value[out_row * 2 + 1];
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ca * a->value[i] + cb * b->value[i];
  bool needs = a->needs_grad || b->needs_grad || alpha->needs_grad;
  return make(std::move(out), needs, [a, b, alpha, out_row, ca, cb](Tape&, Node& self) {
    std::size_t n = self.grad.numel();
    if (a->needs_grad) {
      Tensor& ga = ensure_grad(a);
      for (std::size_t i = 0; i < n; ++i) ga[i] += ca * self.grad[i];
    }
    if (b->needs_grad) {
      Tensor& gb = ensure_grad(b);
      for (std::size_t i = 0; i < n; ++i) gb[i] += cb * self.grad[i];
    }
    if (alpha->needs_grad) {
      Tensor& gal = ensure_grad(alpha);
      double da = 0.0, db = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        da += a->value[i] * self.grad[i];
        db += b->value[i] * self.grad[i];
      }
      gal[out_row * 2] += da;
      gal[out_row * 2 + 1] += db;
    }
  });
}

Tape::Node* Tape::group_max_cols(Node* x, std::size_t group) {
  check_rank2(x->value, "group_max_cols");
  std::size_t r = x->value.rows(), c = x->value.cols();
  if (group == 0 || c % group) throw std::invalid_argument("group_max_cols: bad group size");
  std::size_t oc = c / group;
  Tensor out({r, oc});
  auto arg = std::make_shared<std::vector<std::uint32_t>>(r * oc);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < oc; ++j) {
      std::size_t base = i * c + j * group;
      std::size_t best = base;
      double bv = x->value[base];
      for (std::size_t q = 1; q < group; ++q)
        if (x->value[base + q] > bv) {
          bv = x->value[base + q];
          best = base + q;
        }
      out[i * oc + j] = bv;
      (*arg)[i * oc + j] = static_cast<std::uint32_t>(best);
    }
  return make(std::move(out), x->needs_grad, [x, arg](Tape&, Node& self) {
    Tensor& gx = ensure_grad(x);
    for (std::size_t i = 0; i < self.grad.numel(); ++i) gx[(*arg)[i]] += self.grad[i];
  });
}

Tape::Node* Tape::arcface_margin(Node* cosines, const std::vector<std::size_t>& labels, double margin) {
  check_rank2(cosines->value, "arcface_margin");
  std::size_t r = cosines->value.rows(), c = cosines->value.cols();
  if (labels.size() != r) throw std::invalid_argument("arcface_margin: label count mismatch");
  double cm = std::cos(margin), sm = std::sin(margin);
  Tensor out = cosines->value;
  auto clamped = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] >= c) throw std::invalid_argument("arcface_margin: label out of range");
    double s = std::min(1.0 - 1e-7, std::max(-1.0 + 1e-7, out[i * c + labels[i]]));
    (*clamped)[i] = s;
    out[i * c + labels[i]] = s * cm - std::sqrt(1.0 - s * s) * sm;  // cos(theta + m)
  }
  return make(std::move(out), cosines->needs_grad, [cosines, labels, cm, sm, clamped, c](Tape&, Node& self) {
    Tensor& g = ensure_grad(cosines);
    std::size_t r = self.grad.rows();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        double gy = self.grad[i * c + j];
        if (j == labels[i]) {
          double s = (*clamped)[i];
          g[i * c + j] += gy * (cm + s * sm / std::sqrt(1.0 - s * s));
        } else {
          g[i * c + j] += gy;
        }
      }
  });
}

Tape::Node* Tape::pick_per_row(Node* x, const std::vector<std::size_t>& cols) {
  check_rank2(x->value, "pick_per_row");
  std::size_t r = x->value.rows(), c = x->value.cols();
  if (cols.size() != r) throw std::invalid_argument("pick_per_row: index count mismatch");
  Tensor out({r});
  for (std::size_t i = 0; i < r; ++i) {
    if (cols[i] >= c) throw std::invalid_argument("pick_per_row: index out of range");
    out[i] = x->value[i * c + cols[i]];
  }
  return make(std::move(out), x->needs_grad, [x, cols, c](Tape&, Node& self) {
    Tensor& gx = ensure_grad(x);
    for (std::size_t i = 0; i < self.grad.numel(); ++i) gx[i * c + cols[i]] += self.grad[i];
  });
}

Tape::Node* Tape::bce_mean(Node* p, const Tensor& targets) {
  std::size_t n = p->value.numel();
  if (targets.numel() != n) throw std::invalid_argument("bce_mean: target count mismatch");
  constexpr double kEps = 1e-12;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double q = std::min(1.0 - kEps, std::max(kEps, p->value[i]));
    double y = targets[i];
    loss -= y * std::log(q) + (1.0 - y) * std::log(1.0 - q);
  }
  loss /= static_cast<double>(n);
  Tensor y = targets;
  return make(Tensor::scalar(loss), p->needs_grad, [p, y = std::move(y), n](Tape&, Node& self) {
    Tensor& gp = ensure_grad(p);
    double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double q = p->value[i];
      if (q <= 1e-12 || q >= 1.0 - 1e-12) continue;  // clamped region
      gp[i] += g * (q - y[i]) / (q * (1.0 - q));
    }
  });
}

void Tape::backward(Node* root) {
  if (!grad_) throw std::logic_error("backward: tape was created without gradients");
  if (!owns(root)) throw std::logic_error("backward: node does not belong to this tape");
  if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  ensure_grad(root)[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.grad.empty() || !n.needs_grad || !n.backprop) continue;
    n.backprop(*this, n);
  }
}

}  // namespace alertgraph::nn
