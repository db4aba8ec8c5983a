#include "scenforge/tape.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace scenforge::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void fail(const std::string& what) { throw std::runtime_error(what); }

void require(bool ok, const std::string& what) {
  if (!ok) fail(what);
}

std::size_t conv_t_out(std::size_t t_in, const ConvDesc& d) {
  require(t_in + 2 * d.pad >= d.kernel, "conv1d: input length " + std::to_string(t_in) +
                                            " shorter than kernel " + std::to_string(d.kernel));
  return (t_in + 2 * d.pad - d.kernel) / d.stride + 1;
}

// x:[N,Cin,T] -> M:[(N*Tout) x (Cin*K)], zero padded outside the valid range.
Tensor im2col(const Tensor& x, const ConvDesc& d) {
  const std::size_t n = x.dim(0), t_in = d.t_in, t_out = d.t_out, k = d.kernel;
  Tensor m({n * t_out, d.in_c * k});
  for (std::size_t b = 0; b < n; ++b) {
    const double* xb = x.data() + b * d.in_c * t_in;
    for (std::size_t to = 0; to < t_out; ++to) {
      double* row = m.data() + (b * t_out + to) * d.in_c * k;
      for (std::size_t ci = 0; ci < d.in_c; ++ci) {
        for (std::size_t j = 0; j < k; ++j) {
          std::ptrdiff_t t = static_cast<std::ptrdiff_t>(to * d.stride + j) - static_cast<std::ptrdiff_t>(d.pad);
          row[ci * k + j] =
              (t >= 0 && t < static_cast<std::ptrdiff_t>(t_in)) ? xb[ci * t_in + static_cast<std::size_t>(t)] : 0.0;
        }
      }
    }
  }
  return m;
}

// Scatter-add the im2col layout back: D:[(N*Tout) x (Cin*K)] -> [N,Cin,T].
Tensor col2im(const Tensor& cols, std::size_t n, const ConvDesc& d) {
  Tensor x({n, d.in_c, d.t_in});
  for (std::size_t b = 0; b < n; ++b) {
    double* xb = x.data() + b * d.in_c * d.t_in;
    for (std::size_t to = 0; to < d.t_out; ++to) {
      const double* row = cols.data() + (b * d.t_out + to) * d.in_c * d.kernel;
      for (std::size_t ci = 0; ci < d.in_c; ++ci) {
        for (std::size_t j = 0; j < d.kernel; ++j) {
          std::ptrdiff_t t = static_cast<std::ptrdiff_t>(to * d.stride + j) - static_cast<std::ptrdiff_t>(d.pad);
          if (t >= 0 && t < static_cast<std::ptrdiff_t>(d.t_in)) {
            xb[ci * d.t_in + static_cast<std::size_t>(t)] += row[ci * d.kernel + j];
          }
        }
      }
    }
  }
  return x;
}

// g:[N,Cout,Tout] -> [(N*Tout) x Cout]
Tensor grad_to_rows(const Tensor& g, std::size_t out_c, std::size_t t_out) {
  const std::size_t n = g.dim(0);
  Tensor rows({n * t_out, out_c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t co = 0; co < out_c; ++co) {
      const double* src = g.data() + (b * out_c + co) * t_out;
      for (std::size_t to = 0; to < t_out; ++to) rows[(b * t_out + to) * out_c + co] = src[to];
    }
  }
  return rows;
}

Tensor sigmoid_tensor(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return y;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kInput: return "input";
    case Op::kParam: return "param";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLeakyRelu: return "leaky_relu";
    case Op::kSqrt: return "sqrt";
    case Op::kSquare: return "square";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kBroadcastScalar: return "broadcast_scalar";
    case Op::kSumAxis0: return "sum_axis0";
    case Op::kBroadcastRow: return "broadcast_row";
    case Op::kSumAxis1: return "sum_axis1";
    case Op::kBroadcastCol: return "broadcast_col";
    case Op::kConcatAxis1: return "concat_axis1";
    case Op::kSliceAxis1: return "slice_axis1";
    case Op::kPadAxis1: return "pad_axis1";
    case Op::kReshape: return "reshape";
    case Op::kGatherRows: return "gather_rows";
    case Op::kScatterRows: return "scatter_rows";
    case Op::kConv1d: return "conv1d";
    case Op::kConv1dInputGrad: return "conv1d_input_grad";
    case Op::kConv1dWeightGrad: return "conv1d_weight_grad";
    case Op::kAddChanBias: return "add_chan_bias";
    case Op::kSumChan: return "sum_chan";
    case Op::kBroadcastChan: return "broadcast_chan";
    case Op::kSumTime: return "sum_time";
    case Op::kBroadcastTime: return "broadcast_time";
    case Op::kSwapAxes12: return "swap_axes12";
    case Op::kSliceTime: return "slice_time";
    case Op::kPadTime: return "pad_time";
    case Op::kLstmCell: return "lstm_cell";
    case Op::kBatchNormTrain: return "batch_norm_train";
  }
  return "?";
}

Var Tape::push(Op op, std::vector<int> in, Tensor value, Attr attr) {
  nodes_.push_back(Node{op, std::move(in), std::move(value), std::move(attr), nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::clear() {
  nodes_.clear();
  param_nodes_.clear();
}

double Tape::scalar_value(Var v) const {
  const Tensor& t = value(v);
  require(t.numel() == 1, "scalar_value: tensor has " + std::to_string(t.numel()) + " elements");
  return t[0];
}

Var Tape::constant(Tensor v) { return push(Op::kConstant, {}, std::move(v)); }

Var Tape::input(Tensor v) { return push(Op::kInput, {}, std::move(v)); }

Var Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var{this, it->second};
  Var v = push(Op::kParam, {}, p.value);
  nodes_.back().param = &p;
  param_nodes_[&p] = v.id;
  return v;
}

Var Tape::add(Var a, Var b) {
  require(value(a).same_shape(value(b)), std::string("add: shape mismatch ") + shape_str(value(a).shape()) + " vs " +
                                             shape_str(value(b).shape()));
  Tensor out(value(a).shape());
  const Tensor &ta = value(a), &tb = value(b);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] + tb[i];
  return push(Op::kAdd, {a.id, b.id}, std::move(out));
}

Var Tape::sub(Var a, Var b) {
  require(value(a).same_shape(value(b)), std::string("sub: shape mismatch ") + shape_str(value(a).shape()) + " vs " +
                                             shape_str(value(b).shape()));
  Tensor out(value(a).shape());
  const Tensor &ta = value(a), &tb = value(b);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] - tb[i];
  return push(Op::kSub, {a.id, b.id}, std::move(out));
}

Var Tape::mul(Var a, Var b) {
  require(value(a).same_shape(value(b)), std::string("mul: shape mismatch ") + shape_str(value(a).shape()) + " vs " +
                                             shape_str(value(b).shape()));
  Tensor out(value(a).shape());
  const Tensor &ta = value(a), &tb = value(b);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] * tb[i];
  return push(Op::kMul, {a.id, b.id}, std::move(out));
}

Var Tape::div(Var a, Var b) {
  require(value(a).same_shape(value(b)), std::string("div: shape mismatch ") + shape_str(value(a).shape()) + " vs " +
                                             shape_str(value(b).shape()));
  Tensor out(value(a).shape());
  const Tensor &ta = value(a), &tb = value(b);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] / tb[i];
  return push(Op::kDiv, {a.id, b.id}, std::move(out));
}

Var Tape::neg(Var a) {
  Tensor out(value(a).shape());
  const Tensor& ta = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = -ta[i];
  return push(Op::kNeg, {a.id}, std::move(out));
}

Var Tape::scale(Var a, double c) {
  Tensor out(value(a).shape());
  const Tensor& ta = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = c * ta[i];
  return push(Op::kScale, {a.id}, std::move(out), c);
}

Var Tape::add_scalar(Var a, double c) {
  Tensor out(value(a).shape());
  const Tensor& ta = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] + c;
  return push(Op::kAddScalar, {a.id}, std::move(out), c);
}

Var Tape::matmul(Var a, Var b) {
  const Tensor &ta = value(a), &tb = value(b);
  require(ta.rank() == 2 && tb.rank() == 2 && ta.cols() == tb.rows(),
          "matmul: incompatible shapes " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
  Tensor out({ta.rows(), tb.cols()});
  ConstMap ma(ta.data(), static_cast<Eigen::Index>(ta.rows()), static_cast<Eigen::Index>(ta.cols()));
  ConstMap mb(tb.data(), static_cast<Eigen::Index>(tb.rows()), static_cast<Eigen::Index>(tb.cols()));
  MutMap mc(out.data(), static_cast<Eigen::Index>(out.rows()), static_cast<Eigen::Index>(out.cols()));
  mc.noalias() = ma * mb;
  return push(Op::kMatMul, {a.id, b.id}, std::move(out));
}

Var Tape::transpose(Var a) {
  const Tensor& ta = value(a);
  require(ta.rank() == 2, "transpose: rank-2 required, got " + shape_str(ta.shape()));
  Tensor out({ta.cols(), ta.rows()});
  for (std::size_t r = 0; r < ta.rows(); ++r)
    for (std::size_t c = 0; c < ta.cols(); ++c) out.at(c, r) = ta.at(r, c);
  return push(Op::kTranspose, {a.id}, std::move(out));
}

Var Tape::tanh(Var a) {
  Tensor out(value(a).shape());
  const Tensor& ta = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(ta[i]);
  return push(Op::kTanh, {a.id}, std::move(out));
}

Var Tape::sigmoid(Var a) {
  Tensor out = sigmoid_tensor(value(a));
  return push(Op::kSigmoid, {a.id}, std::move(out));
}

Var Tape::leaky_relu(Var a, double slope) {
  Tensor out(value(a).shape());
  const Tensor& ta = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] > 0.0 ? ta[i] : slope * ta[i];
  return push(Op::kLeakyRelu, {a.id}, std::move(out), slope);
}

Var Tape::sqrt(Var a) {
  Tensor out(value(a).shape());
  const Tensor& ta = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(ta[i]);
  return push(Op::kSqrt, {a.id}, std::move(out));
}

Var Tape::square(Var a) {
  Tensor out(value(a).shape());
  const Tensor& ta = value(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] * ta[i];
  return push(Op::kSquare, {a.id}, std::move(out));
}

Var Tape::sum(Var a) {
  double s = 0.0;
  for (double v : value(a).values()) s += v;
  return push(Op::kSum, {a.id}, Tensor::scalar(s));
}

Var Tape::mean(Var a) {
  double s = 0.0;
  for (double v : value(a).values()) s += v;
  return push(Op::kMean, {a.id}, Tensor::scalar(s / static_cast<double>(value(a).numel())));
}

Var Tape::broadcast_scalar(Var a, Shape shape) {
  require(value(a).numel() == 1, "broadcast_scalar: source not scalar");
  Tensor out = Tensor::full(shape, value(a)[0]);
  return push(Op::kBroadcastScalar, {a.id}, std::move(out), std::move(shape));
}

Var Tape::sum_axis0(Var a) {
  const Tensor& ta = value(a);
  require(ta.rank() == 2, "sum_axis0: rank-2 required, got " + shape_str(ta.shape()));
  Tensor out({ta.cols()});
  for (std::size_t r = 0; r < ta.rows(); ++r)
    for (std::size_t c = 0; c < ta.cols(); ++c) out[c] += ta.at(r, c);
  return push(Op::kSumAxis0, {a.id}, std::move(out));
}

Var Tape::broadcast_row(Var a, std::size_t n) {
  const Tensor& ta = value(a);
  require(ta.rank() == 1, "broadcast_row: rank-1 required, got " + shape_str(ta.shape()));
  Tensor out({n, ta.numel()});
  for (std::size_t r = 0; r < n; ++r) std::memcpy(out.data() + r * ta.numel(), ta.data(), ta.numel() * sizeof(double));
  return push(Op::kBroadcastRow, {a.id}, std::move(out), n);
}

Var Tape::sum_axis1(Var a) {
  const Tensor& ta = value(a);
  require(ta.rank() == 2, "sum_axis1: rank-2 required, got " + shape_str(ta.shape()));
  Tensor out({ta.rows()});
  for (std::size_t r = 0; r < ta.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < ta.cols(); ++c) s += ta.at(r, c);
    out[r] = s;
  }
  return push(Op::kSumAxis1, {a.id}, std::move(out));
}

Var Tape::broadcast_col(Var a, std::size_t m) {
  const Tensor& ta = value(a);
  require(ta.rank() == 1, "broadcast_col: rank-1 required, got " + shape_str(ta.shape()));
  Tensor out({ta.numel(), m});
  for (std::size_t r = 0; r < ta.numel(); ++r)
    for (std::size_t c = 0; c < m; ++c) out.at(r, c) = ta[r];
  return push(Op::kBroadcastCol, {a.id}, std::move(out), m);
}

namespace {
// Shared geometry for the axis-1 concat/slice/pad family. Rank 2 treats axis 1
// as columns, rank 3 as channels; `inner` is the contiguous run per entry.
struct Axis1Geom {
  std::size_t outer, extent, inner;
};

Axis1Geom axis1_geom(const Tensor& t) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1), 1};
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  fail("axis-1 op: rank-2 or rank-3 required, got " + shape_str(t.shape()));
}
}  // namespace

Var Tape::concat_axis1(std::span<const Var> xs) {
  require(!xs.empty(), "concat_axis1: no inputs");
  Axis1Geom g0 = axis1_geom(value(xs[0]));
  std::size_t total = 0;
  std::vector<int> in;
  for (Var x : xs) {
    Axis1Geom g = axis1_geom(value(x));
    require(g.outer == g0.outer && g.inner == g0.inner && value(x).rank() == value(xs[0]).rank(),
            "concat_axis1: incompatible shapes");
    total += g.extent;
    in.push_back(x.id);
  }
  Shape shape = value(xs[0]).shape();
  shape[1] = total;
  Tensor out(shape);
  for (std::size_t o = 0; o < g0.outer; ++o) {
    std::size_t at = 0;
    for (Var x : xs) {
      const Tensor& tx = value(x);
      Axis1Geom g = axis1_geom(tx);
      std::memcpy(out.data() + (o * total + at) * g0.inner, tx.data() + o * g.extent * g.inner,
                  g.extent * g.inner * sizeof(double));
      at += g.extent;
    }
  }
  return push(Op::kConcatAxis1, std::move(in), std::move(out));
}

Var Tape::slice_axis1(Var a, std::size_t offset, std::size_t extent) {
  const Tensor& ta = value(a);
  Axis1Geom g = axis1_geom(ta);
  require(offset + extent <= g.extent, "slice_axis1: out of range");
  Shape shape = ta.shape();
  shape[1] = extent;
  Tensor out(shape);
  for (std::size_t o = 0; o < g.outer; ++o) {
    std::memcpy(out.data() + o * extent * g.inner, ta.data() + (o * g.extent + offset) * g.inner,
                extent * g.inner * sizeof(double));
  }
  return push(Op::kSliceAxis1, {a.id}, std::move(out), SliceDesc{offset, extent, g.extent});
}

Var Tape::pad_axis1(Var a, std::size_t offset, std::size_t parent_extent) {
  const Tensor& ta = value(a);
  Axis1Geom g = axis1_geom(ta);
  require(offset + g.extent <= parent_extent, "pad_axis1: out of range");
  Shape shape = ta.shape();
  shape[1] = parent_extent;
  Tensor out(shape);
  for (std::size_t o = 0; o < g.outer; ++o) {
    std::memcpy(out.data() + (o * parent_extent + offset) * g.inner, ta.data() + o * g.extent * g.inner,
                g.extent * g.inner * sizeof(double));
  }
  return push(Op::kPadAxis1, {a.id}, std::move(out), SliceDesc{offset, g.extent, parent_extent});
}

Var Tape::reshape(Var a, Shape shape) {
  Tensor out = value(a).reshaped(shape);
  return push(Op::kReshape, {a.id}, std::move(out), value(a).shape());
}

Var Tape::gather_rows(Var table, GatherDesc ids) {
  const Tensor& tt = value(table);
  require(tt.rank() == 2, "gather_rows: table must be rank-2");
  require(ids.table_rows == tt.rows(), "gather_rows: table rows mismatch");
  const auto& idx = *ids.ids;
  Tensor out({idx.size(), tt.cols()});
  for (std::size_t n = 0; n < idx.size(); ++n) {
    require(idx[n] < tt.rows(), "gather_rows: id " + std::to_string(idx[n]) + " out of range");
    std::memcpy(out.data() + n * tt.cols(), tt.data() + idx[n] * tt.cols(), tt.cols() * sizeof(double));
  }
  return push(Op::kGatherRows, {table.id}, std::move(out), std::move(ids));
}

Var Tape::scatter_rows(Var rows, GatherDesc ids) {
  const Tensor& tr = value(rows);
  require(tr.rank() == 2, "scatter_rows: rows must be rank-2");
  const auto& idx = *ids.ids;
  require(idx.size() == tr.rows(), "scatter_rows: id count mismatch");
  Tensor out({ids.table_rows, tr.cols()});
  for (std::size_t n = 0; n < idx.size(); ++n) {
    double* dst = out.data() + idx[n] * tr.cols();
    const double* src = tr.data() + n * tr.cols();
    for (std::size_t c = 0; c < tr.cols(); ++c) dst[c] += src[c];
  }
  return push(Op::kScatterRows, {rows.id}, std::move(out), std::move(ids));
}

Var Tape::conv1d(Var x, Var w, ConvDesc d) {
  const Tensor &tx = value(x), &tw = value(w);
  require(tx.rank() == 3, "conv1d: input must be [N,C,T], got " + shape_str(tx.shape()));
  require(tx.dim(1) == d.in_c, "conv1d: expected " + std::to_string(d.in_c) + " channels, got " +
                                   std::to_string(tx.dim(1)));
  require(tw.numel() == d.out_c * d.in_c * d.kernel, "conv1d: weight shape " + shape_str(tw.shape()) +
                                                         " does not match descriptor");
  d.t_in = tx.dim(2);
  d.t_out = conv_t_out(d.t_in, d);
  const std::size_t n = tx.dim(0);
  Tensor m = im2col(tx, d);
  Tensor out({n, d.out_c, d.t_out});
  // [(N*Tout) x (Cin*K)] * [(Cin*K) x Cout]
  ConstMap mm(m.data(), static_cast<Eigen::Index>(n * d.t_out), static_cast<Eigen::Index>(d.in_c * d.kernel));
  ConstMap mw(tw.data(), static_cast<Eigen::Index>(d.out_c), static_cast<Eigen::Index>(d.in_c * d.kernel));
  RowMat y = mm * mw.transpose();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < d.out_c; ++co)
      for (std::size_t to = 0; to < d.t_out; ++to)
        out[(b * d.out_c + co) * d.t_out + to] = y(static_cast<Eigen::Index>(b * d.t_out + to),
                                                   static_cast<Eigen::Index>(co));
  return push(Op::kConv1d, {x.id, w.id}, std::move(out), d);
}

Var Tape::conv1d_input_grad(Var g, Var w, ConvDesc d) {
  const Tensor &tg = value(g), &tw = value(w);
  require(tg.rank() == 3 && tg.dim(1) == d.out_c && tg.dim(2) == d.t_out,
          "conv1d_input_grad: bad gradient shape " + shape_str(tg.shape()));
  const std::size_t n = tg.dim(0);
  Tensor rows = grad_to_rows(tg, d.out_c, d.t_out);
  ConstMap mr(rows.data(), static_cast<Eigen::Index>(n * d.t_out), static_cast<Eigen::Index>(d.out_c));
  ConstMap mw(tw.data(), static_cast<Eigen::Index>(d.out_c), static_cast<Eigen::Index>(d.in_c * d.kernel));
  RowMat cols = mr * mw;  // [(N*Tout) x (Cin*K)]
  Tensor colt({n * d.t_out, d.in_c * d.kernel});
  std::memcpy(colt.data(), cols.data(), colt.numel() * sizeof(double));
  Tensor out = col2im(colt, n, d);
  return push(Op::kConv1dInputGrad, {g.id, w.id}, std::move(out), d);
}

Var Tape::conv1d_weight_grad(Var x, Var g, ConvDesc d) {
  const Tensor &tx = value(x), &tg = value(g);
  require(tx.rank() == 3 && tx.dim(1) == d.in_c && tx.dim(2) == d.t_in,
          "conv1d_weight_grad: bad input shape " + shape_str(tx.shape()));
  require(tg.rank() == 3 && tg.dim(1) == d.out_c && tg.dim(2) == d.t_out,
          "conv1d_weight_grad: bad gradient shape " + shape_str(tg.shape()));
  const std::size_t n = tx.dim(0);
  Tensor m = im2col(tx, d);
  Tensor rows = grad_to_rows(tg, d.out_c, d.t_out);
  ConstMap mm(m.data(), static_cast<Eigen::Index>(n * d.t_out), static_cast<Eigen::Index>(d.in_c * d.kernel));
  ConstMap mr(rows.data(), static_cast<Eigen::Index>(n * d.t_out), static_cast<Eigen::Index>(d.out_c));
  RowMat gw = mr.transpose() * mm;  // [Cout x (Cin*K)]
  Tensor out({d.out_c, d.in_c, d.kernel});
  std::memcpy(out.data(), gw.data(), out.numel() * sizeof(double));
  return push(Op::kConv1dWeightGrad, {x.id, g.id}, std::move(out), d);
}

Var Tape::add_chan_bias(Var y, Var b) {
  const Tensor &ty = value(y), &tb = value(b);
  require(ty.rank() == 3 && tb.rank() == 1 && tb.numel() == ty.dim(1),
          "add_chan_bias: shapes " + shape_str(ty.shape()) + " and " + shape_str(tb.shape()));
  Tensor out = ty;
  const std::size_t n = ty.dim(0), c = ty.dim(1), t = ty.dim(2);
  for (std::size_t bn = 0; bn < n; ++bn)
    for (std::size_t ci = 0; ci < c; ++ci) {
      double* row = out.data() + (bn * c + ci) * t;
      for (std::size_t ti = 0; ti < t; ++ti) row[ti] += tb[ci];
    }
  return push(Op::kAddChanBias, {y.id, b.id}, std::move(out));
}

Var Tape::sum_chan(Var a) {
  const Tensor& ta = value(a);
  require(ta.rank() == 3, "sum_chan: rank-3 required");
  const std::size_t n = ta.dim(0), c = ta.dim(1), t = ta.dim(2);
  Tensor out({c});
  for (std::size_t bn = 0; bn < n; ++bn)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* row = ta.data() + (bn * c + ci) * t;
      for (std::size_t ti = 0; ti < t; ++ti) out[ci] += row[ti];
    }
  return push(Op::kSumChan, {a.id}, std::move(out));
}

Var Tape::broadcast_chan(Var a, std::size_t n, std::size_t t) {
  const Tensor& ta = value(a);
  require(ta.rank() == 1, "broadcast_chan: rank-1 required");
  const std::size_t c = ta.numel();
  Tensor out({n, c, t});
  for (std::size_t bn = 0; bn < n; ++bn)
    for (std::size_t ci = 0; ci < c; ++ci) {
      double* row = out.data() + (bn * c + ci) * t;
      for (std::size_t ti = 0; ti < t; ++ti) row[ti] = ta[ci];
    }
  return push(Op::kBroadcastChan, {a.id}, std::move(out));
}

Var Tape::sum_time(Var a) {
  const Tensor& ta = value(a);
  require(ta.rank() == 3, "sum_time: rank-3 required");
  const std::size_t n = ta.dim(0), c = ta.dim(1), t = ta.dim(2);
  Tensor out({n, c});
  for (std::size_t bn = 0; bn < n; ++bn)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* row = ta.data() + (bn * c + ci) * t;
      double s = 0.0;
      for (std::size_t ti = 0; ti < t; ++ti) s += row[ti];
      out.at(bn, ci) = s;
    }
  return push(Op::kSumTime, {a.id}, std::move(out));
}

Var Tape::broadcast_time(Var a, std::size_t t) {
  const Tensor& ta = value(a);
  require(ta.rank() == 2, "broadcast_time: rank-2 required");
  const std::size_t n = ta.dim(0), c = ta.dim(1);
  Tensor out({n, c, t});
  for (std::size_t bn = 0; bn < n; ++bn)
    for (std::size_t ci = 0; ci < c; ++ci) {
      double* row = out.data() + (bn * c + ci) * t;
      for (std::size_t ti = 0; ti < t; ++ti) row[ti] = ta.at(bn, ci);
    }
  return push(Op::kBroadcastTime, {a.id}, std::move(out), t);
}

Var Tape::swap_axes12(Var a) {
  const Tensor& ta = value(a);
  require(ta.rank() == 3, "swap_axes12: rank-3 required");
  const std::size_t n = ta.dim(0), d1 = ta.dim(1), d2 = ta.dim(2);
  Tensor out({n, d2, d1});
  for (std::size_t bn = 0; bn < n; ++bn)
    for (std::size_t i = 0; i < d1; ++i)
      for (std::size_t j = 0; j < d2; ++j)
        out[(bn * d2 + j) * d1 + i] = ta[(bn * d1 + i) * d2 + j];
  return push(Op::kSwapAxes12, {a.id}, std::move(out));
}

Var Tape::slice_time(Var a, std::size_t t) {
  const Tensor& ta = value(a);
  require(ta.rank() == 3 && t < ta.dim(1), "slice_time: step out of range");
  const std::size_t n = ta.dim(0), tt = ta.dim(1), c = ta.dim(2);
  Tensor out({n, c});
  for (std::size_t bn = 0; bn < n; ++bn)
    std::memcpy(out.data() + bn * c, ta.data() + (bn * tt + t) * c, c * sizeof(double));
  return push(Op::kSliceTime, {a.id}, std::move(out), SliceDesc{t, 1, tt});
}

Var Tape::pad_time(Var a, std::size_t t, std::size_t t_total) {
  const Tensor& ta = value(a);
  require(ta.rank() == 2 && t < t_total, "pad_time: step out of range");
  const std::size_t n = ta.dim(0), c = ta.dim(1);
  Tensor out({n, t_total, c});
  for (std::size_t bn = 0; bn < n; ++bn)
    std::memcpy(out.data() + (bn * t_total + t) * c, ta.data() + bn * c, c * sizeof(double));
  return push(Op::kPadTime, {a.id}, std::move(out), SliceDesc{t, 1, t_total});
}

Var Tape::lstm_cell(Var x, Var h, Var c, Var wx, Var wh, Var b, std::size_t hidden) {
  const Tensor &tx = value(x), &th = value(h), &tc = value(c), &twx = value(wx), &twh = value(wh), &tb = value(b);
  const std::size_t n = tx.rows(), in_dim = tx.cols(), hh = hidden;
  require(th.rows() == n && th.cols() == hh && tc.rows() == n && tc.cols() == hh,
          "lstm_cell: state shape mismatch");
  require(twx.rows() == in_dim && twx.cols() == 4 * hh && twh.rows() == hh && twh.cols() == 4 * hh &&
              tb.numel() == 4 * hh,
          "lstm_cell: weight shape mismatch");

  // gates = x*wx + h*wh + b, columns [i | f | g | o]
  Tensor gates({n, 4 * hh});
  {
    ConstMap mx(tx.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in_dim));
    ConstMap mh(th.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(hh));
    ConstMap mwx(twx.data(), static_cast<Eigen::Index>(in_dim), static_cast<Eigen::Index>(4 * hh));
    ConstMap mwh(twh.data(), static_cast<Eigen::Index>(hh), static_cast<Eigen::Index>(4 * hh));
    MutMap mg(gates.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(4 * hh));
    mg.noalias() = mx * mwx + mh * mwh;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < 4 * hh; ++j) gates.at(r, j) += tb[j];
  }

  auto cache = std::make_shared<LstmCache>();
  cache->hidden = hh;
  cache->gate_i = Tensor({n, hh});
  cache->gate_f = Tensor({n, hh});
  cache->gate_g = Tensor({n, hh});
  cache->gate_o = Tensor({n, hh});
  cache->c_new = Tensor({n, hh});
  cache->tanh_c_new = Tensor({n, hh});

  Tensor out({n, 2 * hh});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < hh; ++j) {
      double gi = 1.0 / (1.0 + std::exp(-gates.at(r, j)));
      double gf = 1.0 / (1.0 + std::exp(-gates.at(r, hh + j)));
      double gg = std::tanh(gates.at(r, 2 * hh + j));
      double go = 1.0 / (1.0 + std::exp(-gates.at(r, 3 * hh + j)));
      double cn = gf * tc.at(r, j) + gi * gg;
      double tcn = std::tanh(cn);
      cache->gate_i.at(r, j) = gi;
      cache->gate_f.at(r, j) = gf;
      cache->gate_g.at(r, j) = gg;
      cache->gate_o.at(r, j) = go;
      cache->c_new.at(r, j) = cn;
      cache->tanh_c_new.at(r, j) = tcn;
      out.at(r, j) = go * tcn;   // h'
      out.at(r, hh + j) = cn;    // c'
    }
  }
  return push(Op::kLstmCell, {x.id, h.id, c.id, wx.id, wh.id, b.id}, std::move(out), std::move(cache));
}

Var Tape::batch_norm_train(Var x, Var gamma, Var beta, double eps, Tensor* batch_mean, Tensor* batch_var) {
  const Tensor &tx = value(x), &tg = value(gamma), &tb = value(beta);
  require(tx.rank() == 2, "batch_norm_train: rank-2 required");
  const std::size_t n = tx.rows(), f = tx.cols();
  require(tg.numel() == f && tb.numel() == f, "batch_norm_train: feature count mismatch");

  auto cache = std::make_shared<BatchNormCache>();
  cache->eps = eps;
  cache->batch_mean = Tensor({f});
  cache->batch_var = Tensor({f});
  cache->invstd = Tensor({f});
  cache->xhat = Tensor({n, f});

  for (std::size_t j = 0; j < f; ++j) {
    double m = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += tx.at(r, j);
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double d = tx.at(r, j) - m;
      v += d * d;
    }
    v /= static_cast<double>(n);
    cache->batch_mean[j] = m;
    cache->batch_var[j] = v;
    cache->invstd[j] = 1.0 / std::sqrt(v + eps);
  }

  Tensor out({n, f});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < f; ++j) {
      double xh = (tx.at(r, j) - cache->batch_mean[j]) * cache->invstd[j];
      cache->xhat.at(r, j) = xh;
      out.at(r, j) = xh * tg[j] + tb[j];
    }
  if (batch_mean) *batch_mean = cache->batch_mean;
  if (batch_var) *batch_var = cache->batch_var;
  return push(Op::kBatchNormTrain, {x.id, gamma.id, beta.id}, std::move(out), std::move(cache));
}

void Tape::accumulate(std::vector<int>& adj, int target, Var contrib) {
  if (adj[static_cast<std::size_t>(target)] < 0) {
    adj[static_cast<std::size_t>(target)] = contrib.id;
  } else {
    adj[static_cast<std::size_t>(target)] = add(Var{this, adj[static_cast<std::size_t>(target)]}, contrib).id;
  }
}

void Tape::emit_vjp(int id, Var gout, std::vector<int>& adj, bool require_second_order) {
  // Copy out what we need: pushing new nodes may reallocate nodes_.
  const Op op = nodes_[static_cast<std::size_t>(id)].op;
  const std::vector<int> in = nodes_[static_cast<std::size_t>(id)].in;
  const Attr attr = nodes_[static_cast<std::size_t>(id)].attr;
  Var self{this, id};

  if (require_second_order && (op == Op::kLstmCell || op == Op::kBatchNormTrain)) {
    fail(std::string("gradient_of: op '") + op_name(op) + "' has no second-order rule");
  }

  switch (op) {
    case Op::kConstant:
    case Op::kInput:
    case Op::kParam:
      return;
    case Op::kAdd:
      accumulate(adj, in[0], gout);
      accumulate(adj, in[1], gout);
      return;
    case Op::kSub:
      accumulate(adj, in[0], gout);
      accumulate(adj, in[1], neg(gout));
      return;
    case Op::kMul:
      accumulate(adj, in[0], mul(gout, Var{this, in[1]}));
      accumulate(adj, in[1], mul(gout, Var{this, in[0]}));
      return;
    case Op::kDiv: {
      Var b{this, in[1]};
      Var a{this, in[0]};
      accumulate(adj, in[0], div(gout, b));
      accumulate(adj, in[1], neg(mul(div(gout, mul(b, b)), a)));
      return;
    }
    case Op::kNeg:
      accumulate(adj, in[0], neg(gout));
      return;
    case Op::kScale:
      accumulate(adj, in[0], scale(gout, std::get<double>(attr)));
      return;
    case Op::kAddScalar:
      accumulate(adj, in[0], gout);
      return;
    case Op::kMatMul: {
      Var a{this, in[0]}, b{this, in[1]};
      accumulate(adj, in[0], matmul(gout, transpose(b)));
      accumulate(adj, in[1], matmul(transpose(a), gout));
      return;
    }
    case Op::kTranspose:
      accumulate(adj, in[0], transpose(gout));
      return;
    case Op::kTanh: {
      Var one_minus_sq = add_scalar(neg(mul(self, self)), 1.0);
      accumulate(adj, in[0], mul(gout, one_minus_sq));
      return;
    }
    case Op::kSigmoid: {
      Var s_one_minus = mul(self, add_scalar(neg(self), 1.0));
      accumulate(adj, in[0], mul(gout, s_one_minus));
      return;
    }
    case Op::kLeakyRelu: {
      double slope = std::get<double>(attr);
      const Tensor& x = node(in[0]).value;
      Tensor mask(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : slope;
      accumulate(adj, in[0], mul(gout, constant(std::move(mask))));
      return;
    }
    case Op::kSqrt:
      accumulate(adj, in[0], div(gout, scale(self, 2.0)));
      return;
    case Op::kSquare:
      accumulate(adj, in[0], mul(gout, scale(Var{this, in[0]}, 2.0)));
      return;
    case Op::kSum:
      accumulate(adj, in[0], broadcast_scalar(gout, node(in[0]).value.shape()));
      return;
    case Op::kMean: {
      double inv_n = 1.0 / static_cast<double>(node(in[0]).value.numel());
      accumulate(adj, in[0], broadcast_scalar(scale(gout, inv_n), node(in[0]).value.shape()));
      return;
    }
    case Op::kBroadcastScalar:
      accumulate(adj, in[0], sum(gout));
      return;
    case Op::kSumAxis0:
      accumulate(adj, in[0], broadcast_row(gout, node(in[0]).value.rows()));
      return;
    case Op::kBroadcastRow:
      accumulate(adj, in[0], sum_axis0(gout));
      return;
    case Op::kSumAxis1:
      accumulate(adj, in[0], broadcast_col(gout, node(in[0]).value.cols()));
      return;
    case Op::kBroadcastCol:
      accumulate(adj, in[0], sum_axis1(gout));
      return;
    case Op::kConcatAxis1: {
      std::size_t at = 0;
      for (int src : in) {
        std::size_t extent = node(src).value.dim(1);
        accumulate(adj, src, slice_axis1(gout, at, extent));
        at += extent;
      }
      return;
    }
    case Op::kSliceAxis1: {
      const SliceDesc& d = std::get<SliceDesc>(attr);
      accumulate(adj, in[0], pad_axis1(gout, d.offset, d.parent_extent));
      return;
    }
    case Op::kPadAxis1: {
      const SliceDesc& d = std::get<SliceDesc>(attr);
      accumulate(adj, in[0], slice_axis1(gout, d.offset, d.extent));
      return;
    }
    case Op::kReshape:
      accumulate(adj, in[0], reshape(gout, std::get<Shape>(attr)));
      return;
    case Op::kGatherRows:
      accumulate(adj, in[0], scatter_rows(gout, std::get<GatherDesc>(attr)));
      return;
    case Op::kScatterRows:
      accumulate(adj, in[0], gather_rows(gout, std::get<GatherDesc>(attr)));
      return;
    case Op::kConv1d: {
      const ConvDesc& d = std::get<ConvDesc>(attr);
      accumulate(adj, in[0], conv1d_input_grad(gout, Var{this, in[1]}, d));
      accumulate(adj, in[1], conv1d_weight_grad(Var{this, in[0]}, gout, d));
      return;
    }
    case Op::kConv1dInputGrad: {
      const ConvDesc& d = std::get<ConvDesc>(attr);
      accumulate(adj, in[0], conv1d(gout, Var{this, in[1]}, d));
      accumulate(adj, in[1], conv1d_weight_grad(gout, Var{this, in[0]}, d));
      return;
    }
    case Op::kConv1dWeightGrad: {
      const ConvDesc& d = std::get<ConvDesc>(attr);
      accumulate(adj, in[0], conv1d_input_grad(Var{this, in[1]}, gout, d));
      accumulate(adj, in[1], conv1d(Var{this, in[0]}, gout, d));
      return;
    }
    case Op::kAddChanBias:
      accumulate(adj, in[0], gout);
      accumulate(adj, in[1], sum_chan(gout));
      return;
    case Op::kSumChan: {
      const Tensor& x = node(in[0]).value;
      accumulate(adj, in[0], broadcast_chan(gout, x.dim(0), x.dim(2)));
      return;
    }
    case Op::kBroadcastChan:
      accumulate(adj, in[0], sum_chan(gout));
      return;
    case Op::kSumTime: {
      const Tensor& x = node(in[0]).value;
      accumulate(adj, in[0], broadcast_time(gout, x.dim(2)));
      return;
    }
    case Op::kBroadcastTime:
      accumulate(adj, in[0], sum_time(gout));
      return;
    case Op::kSwapAxes12:
      accumulate(adj, in[0], swap_axes12(gout));
      return;
    case Op::kSliceTime: {
      const SliceDesc& d = std::get<SliceDesc>(attr);
      accumulate(adj, in[0], pad_time(gout, d.offset, d.parent_extent));
      return;
    }
    case Op::kPadTime: {
      const SliceDesc& d = std::get<SliceDesc>(attr);
      accumulate(adj, in[0], slice_time(gout, d.offset));
      return;
    }
    case Op::kLstmCell: {
      const auto& cache = *std::get<std::shared_ptr<LstmCache>>(attr);
      const std::size_t hh = cache.hidden;
      const Tensor& g = value(gout);
      const Tensor& tx = node(in[0]).value;
      const Tensor& th = node(in[1]).value;
      const Tensor& tc = node(in[2]).value;
      const Tensor& twx = node(in[3]).value;
      const Tensor& twh = node(in[4]).value;
      const std::size_t n = tx.rows(), in_dim = tx.cols();

      Tensor d_gates({n, 4 * hh});
      Tensor d_c_prev({n, hh});
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < hh; ++j) {
          double gh = g.at(r, j);
          double gc_out = g.at(r, hh + j);
          double i = cache.gate_i.at(r, j), ff = cache.gate_f.at(r, j);
          double gg = cache.gate_g.at(r, j), o = cache.gate_o.at(r, j);
          double tcn = cache.tanh_c_new.at(r, j);
          double dc = gc_out + gh * o * (1.0 - tcn * tcn);
          double d_o = gh * tcn;
          d_gates.at(r, j) = dc * gg * i * (1.0 - i);
          d_gates.at(r, hh + j) = dc * tc.at(r, j) * ff * (1.0 - ff);
          d_gates.at(r, 2 * hh + j) = dc * i * (1.0 - gg * gg);
          d_gates.at(r, 3 * hh + j) = d_o * o * (1.0 - o);
          d_c_prev.at(r, j) = dc * ff;
        }
      }

      ConstMap mdg(d_gates.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(4 * hh));
      ConstMap mwx(twx.data(), static_cast<Eigen::Index>(in_dim), static_cast<Eigen::Index>(4 * hh));
      ConstMap mwh(twh.data(), static_cast<Eigen::Index>(hh), static_cast<Eigen::Index>(4 * hh));
      ConstMap mx(tx.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in_dim));
      ConstMap mh(th.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(hh));

      Tensor gx({n, in_dim}), gh2({n, hh}), gwx({in_dim, 4 * hh}), gwh({hh, 4 * hh}), gb({4 * hh});
      MutMap(gx.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in_dim)).noalias() =
          mdg * mwx.transpose();
      MutMap(gh2.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(hh)).noalias() =
          mdg * mwh.transpose();
      MutMap(gwx.data(), static_cast<Eigen::Index>(in_dim), static_cast<Eigen::Index>(4 * hh)).noalias() =
          mx.transpose() * mdg;
      MutMap(gwh.data(), static_cast<Eigen::Index>(hh), static_cast<Eigen::Index>(4 * hh)).noalias() =
          mh.transpose() * mdg;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < 4 * hh; ++j) gb[j] += d_gates.at(r, j);

      accumulate(adj, in[0], constant(std::move(gx)));
      accumulate(adj, in[1], constant(std::move(gh2)));
      accumulate(adj, in[2], constant(std::move(d_c_prev)));
      accumulate(adj, in[3], constant(std::move(gwx)));
      accumulate(adj, in[4], constant(std::move(gwh)));
      accumulate(adj, in[5], constant(std::move(gb)));
      return;
    }
    case Op::kBatchNormTrain: {
      const auto& cache = *std::get<std::shared_ptr<BatchNormCache>>(attr);
      const Tensor& g = value(gout);
      const Tensor& tgam = node(in[1]).value;
      const std::size_t n = g.rows(), f = g.cols();

      Tensor dgamma({f}), dbeta({f}), dx({n, f});
      for (std::size_t j = 0; j < f; ++j) {
        double sg = 0.0, sgx = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          sg += g.at(r, j);
          sgx += g.at(r, j) * cache.xhat.at(r, j);
        }
        dbeta[j] = sg;
        dgamma[j] = sgx;
        double scale_j = cache.invstd[j] * tgam[j] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          dx.at(r, j) = scale_j * (static_cast<double>(n) * g.at(r, j) - sg - cache.xhat.at(r, j) * sgx);
        }
      }
      accumulate(adj, in[0], constant(std::move(dx)));
      accumulate(adj, in[1], constant(std::move(dgamma)));
      accumulate(adj, in[2], constant(std::move(dbeta)));
      return;
    }
  }
  fail(std::string("emit_vjp: unhandled op ") + op_name(op));
}

std::vector<int> Tape::build_adjoints(int root, bool require_second_order) {
  const std::size_t n = nodes_.size();
  std::vector<char> reach(n, 0);
  std::vector<int> stack{root};
  reach[static_cast<std::size_t>(root)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int src : nodes_[static_cast<std::size_t>(id)].in) {
      if (!reach[static_cast<std::size_t>(src)]) {
        reach[static_cast<std::size_t>(src)] = 1;
        stack.push_back(src);
      }
    }
  }

  std::vector<int> adj(n, -1);
  adj[static_cast<std::size_t>(root)] = constant(Tensor::ones(nodes_[static_cast<std::size_t>(root)].value.shape())).id;
  // Node ids are already topologically ordered (inputs precede consumers).
  for (int id = root; id >= 0; --id) {
    if (!reach[static_cast<std::size_t>(id)] || adj[static_cast<std::size_t>(id)] < 0) continue;
    if (nodes_[static_cast<std::size_t>(id)].in.empty()) continue;
    emit_vjp(id, Var{this, adj[static_cast<std::size_t>(id)]}, adj, require_second_order);
  }
  return adj;
}

void Tape::backward(Var loss) {
  require(loss.tape == this, "backward: var from another tape");
  require(value(loss).numel() == 1,
          "backward: loss must be scalar, got " + shape_str(value(loss).shape()));
  std::vector<int> adj = build_adjoints(loss.id, false);
  for (std::size_t id = 0; id < adj.size(); ++id) {
    Node& nd = nodes_[id];
    if (nd.op != Op::kParam || adj[id] < 0) continue;
    const Tensor& g = nodes_[static_cast<std::size_t>(adj[id])].value;
    Tensor& acc = nd.param->grad;
    for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
  }
}

Var Tape::gradient_of(Var output, Var wrt) {
  require(output.tape == this && wrt.tape == this, "gradient_of: var from another tape");
  require(value(output).numel() == 1,
          "gradient_of: output must be scalar, got " + shape_str(value(output).shape()));
  std::vector<int> adj = build_adjoints(output.id, true);
  int g = adj[static_cast<std::size_t>(wrt.id)];
  if (g < 0) return constant(Tensor::zeros(value(wrt).shape()));
  return Var{this, g};
}

}  // namespace scenforge::nn
