#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "scenforge/tensor.hpp"

namespace scenforge::nn {

/// Trainable (or persistent) tensor with an accumulated gradient of the same
/// shape. Buffers such as batch-norm running statistics are Parameters with
/// trainable=false: they round-trip through checkpoints but optimizers skip
/// them.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())), trainable(train) {}

  void zero_grad() {
    for (double& g : grad.values()) g = 0.0;
  }
};

enum class Op : std::uint8_t {
  kConstant,
  kInput,
  kParam,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,
  kAddScalar,
  kMatMul,
  kTranspose,
  kTanh,
  kSigmoid,
  kLeakyRelu,
  kSqrt,
  kSquare,
  kSum,
  kMean,
  kBroadcastScalar,
  kSumAxis0,
  kBroadcastRow,
  kSumAxis1,
  kBroadcastCol,
  kConcatAxis1,
  kSliceAxis1,
  kPadAxis1,
  kReshape,
  kGatherRows,
  kScatterRows,
  kConv1d,
  kConv1dInputGrad,
  kConv1dWeightGrad,
  kAddChanBias,
  kSumChan,
  kBroadcastChan,
  kSumTime,
  kBroadcastTime,
  kSwapAxes12,
  kSliceTime,
  kPadTime,
  kLstmCell,       // fused; first-order only
  kBatchNormTrain  // fused; first-order only
};

const char* op_name(Op op);

struct ConvDesc {
  std::size_t in_c = 0, out_c = 0, kernel = 0, stride = 1, pad = 0;
  std::size_t t_in = 0, t_out = 0;  // filled by the tape from input shapes
};

struct SliceDesc {
  std::size_t offset = 0, extent = 0, parent_extent = 0;
};

struct LstmCache {
  std::size_t hidden = 0;
  Tensor gate_i, gate_f, gate_g, gate_o, c_new, tanh_c_new;
};

struct BatchNormCache {
  double eps = 1e-5;
  Tensor xhat, invstd, batch_mean, batch_var;
};

struct GatherDesc {
  std::shared_ptr<const std::vector<std::size_t>> ids;
  std::size_t table_rows = 0;
};

using Attr = std::variant<std::monostate, double, std::size_t, ConvDesc, SliceDesc,
                          std::shared_ptr<LstmCache>, std::shared_ptr<BatchNormCache>, GatherDesc, Shape>;

struct Node {
  Op op;
  std::vector<int> in;
  Tensor value;
  Attr attr;
  Parameter* param = nullptr;
};

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Eagerly evaluated computation graph with reverse-mode differentiation.
///
/// Adjoints are built as tape nodes out of the same primitive ops, so a
/// gradient produced by gradient_of() is itself differentiable. The fused ops
/// (LSTM cell, train-mode batch norm) emit numeric adjoint contributions and
/// are rejected by gradient_of() with an error naming the op.
class Tape {
 public:
  Var constant(Tensor v);
  Var input(Tensor v);
  Var param(Parameter& p);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var neg(Var a);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var leaky_relu(Var a, double slope);
  Var sqrt(Var a);
  Var square(Var a);
  Var sum(Var a);
  Var mean(Var a);
  Var broadcast_scalar(Var a, Shape shape);
  Var sum_axis0(Var a);                       // [N,M] -> [M]
  Var broadcast_row(Var a, std::size_t n);    // [M] -> [N,M]
  Var sum_axis1(Var a);                       // [N,M] -> [N]
  Var broadcast_col(Var a, std::size_t m);    // [N] -> [N,M]
  Var concat_axis1(std::span<const Var> xs);  // rank-2 columns or rank-3 channels
  Var slice_axis1(Var a, std::size_t offset, std::size_t extent);
  Var pad_axis1(Var a, std::size_t offset, std::size_t parent_extent);
  Var reshape(Var a, Shape shape);
  Var gather_rows(Var table, GatherDesc ids);
  Var scatter_rows(Var rows, GatherDesc ids);
  Var conv1d(Var x, Var w, ConvDesc d);             // x:[N,Cin,T] w:[Cout,Cin,K] -> [N,Cout,Tout]
  Var conv1d_input_grad(Var g, Var w, ConvDesc d);  // -> [N,Cin,T]
  Var conv1d_weight_grad(Var x, Var g, ConvDesc d); // -> [Cout,Cin,K]
  Var add_chan_bias(Var y, Var b);                  // [N,C,T] + [C]
  Var sum_chan(Var a);                              // [N,C,T] -> [C]
  Var broadcast_chan(Var a, std::size_t n, std::size_t t);
  Var sum_time(Var a);                              // [N,C,T] -> [N,C]
  Var broadcast_time(Var a, std::size_t t);         // [N,C] -> [N,C,T]
  Var swap_axes12(Var a);                           // [N,A,B] -> [N,B,A]
  Var slice_time(Var a, std::size_t t);             // [N,T,C] -> [N,C]
  Var pad_time(Var a, std::size_t t, std::size_t t_total);
  Var lstm_cell(Var x, Var h, Var c, Var wx, Var wh, Var b, std::size_t hidden);
  Var batch_norm_train(Var x, Var gamma, Var beta, double eps, Tensor* batch_mean = nullptr,
                       Tensor* batch_var = nullptr);

  const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  double scalar_value(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  void clear();

  /// Accumulates d(loss)/d(p) into every reachable Parameter's grad field.
  /// loss must be scalar.
  void backward(Var loss);

  /// Returns d(output)/d(wrt) as a differentiable tape node. Errors if any op
  /// between wrt and output lacks a second-order rule.
  Var gradient_of(Var output, Var wrt);

 private:
  Var push(Op op, std::vector<int> in, Tensor value, Attr attr = {});
  // Builds adjoint nodes for every ancestor of root; returns adjoint ids
  // indexed by node id (-1 where absent).
  std::vector<int> build_adjoints(int root, bool require_second_order);
  void emit_vjp(int id, Var gout, std::vector<int>& adj, bool require_second_order);
  void accumulate(std::vector<int>& adj, int target, Var contrib);
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  // deque: node references stay valid while the graph grows
  std::deque<Node> nodes_;
  std::unordered_map<Parameter*, int> param_nodes_;
};

}  // namespace scenforge::nn
