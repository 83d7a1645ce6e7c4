#include "lanedet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace lanedet {

// ----- shape helpers ----------------------------------------------------

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        s[i] = s[i + 1] * shape[i + 1];
    return s;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

static void validate_shape(const Shape& shape) {
    for (int d : shape)
        if (d <= 0)
            throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
}

static int normalize_axis(int axis, int rank, const char* op) {
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank)
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for rank " + std::to_string(rank));
    return a;
}

// ----- autodiff node ------------------------------------------------------

namespace autodiff {

struct Node {
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Tensor&)> backprop;  // null for leaves
    Tensor grad;
    std::string param_name;
};

static void accumulate(const std::shared_ptr<Node>& n, const Tensor& g) {
    if (!n->grad.defined()) {
        n->grad = g;
    } else {
        n->grad = add(n->grad, g);
    }
}

}  // namespace autodiff

// ----- grad mode / flop counter -------------------------------------------

namespace {
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_flop_count = 0;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void FlopCounter::add(std::uint64_t macs) { g_flop_count += macs; }
std::uint64_t FlopCounter::count() { return g_flop_count; }
void FlopCounter::reset() { g_flop_count = 0; }

// ----- element views --------------------------------------------------------

namespace {

struct ConstView {
    const double* p64 = nullptr;
    const float* p32 = nullptr;
    double operator[](std::int64_t i) const {
        return p64 ? p64[i] : static_cast<double>(p32[i]);
    }
};

struct MutView {
    double* p64 = nullptr;
    float* p32 = nullptr;
    void set(std::int64_t i, double v) {
        if (p64)
            p64[i] = v;
        else
            p32[i] = static_cast<float>(v);
    }
    double get(std::int64_t i) const {
        return p64 ? p64[i] : static_cast<double>(p32[i]);
    }
    void acc(std::int64_t i, double v) { set(i, get(i) + v); }
};

ConstView cview(const Tensor& t) {
    ConstView v;
    if (t.dtype() == DType::F64)
        v.p64 = t.data64();
    else
        v.p32 = t.data32();
    return v;
}

MutView mview(Tensor& t) {
    MutView v;
    if (t.dtype() == DType::F64)
        v.p64 = t.mut64();
    else
        v.p32 = t.mut32();
    return v;
}

void check_finite(const Tensor& t, const char* op) {
    const ConstView v = cview(t);
    const std::int64_t n = t.size();
    for (std::int64_t i = 0; i < n; ++i)
        if (!std::isfinite(v[i]))
            throw NumericError(std::string(op) + " produced a non-finite value");
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw ContractError(std::string(op) + ": operands must share a dtype");
}

std::vector<std::shared_ptr<autodiff::Node>> collect_parents(
    std::initializer_list<std::shared_ptr<autodiff::Node>> nodes) {
    std::vector<std::shared_ptr<autodiff::Node>> out;
    for (const auto& n : nodes)
        if (n) out.push_back(n);
    return out;
}

void attach(Tensor& out, std::vector<std::shared_ptr<autodiff::Node>> parents,
            std::function<void(const Tensor&)> backprop) {
    if (!g_grad_enabled || parents.empty()) return;
    auto node = std::make_shared<autodiff::Node>();
    node->parents = std::move(parents);
    node->backprop = std::move(backprop);
    out.set_node(std::move(node));
}

// Broadcast bookkeeping: strides aligned to the output rank, zero where an
// input extent is 1.
struct BcastPlan {
    Shape out;
    std::vector<std::int64_t> sa;
    std::vector<std::int64_t> sb;
};

BcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    BcastPlan plan;
    plan.out.resize(r);
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + (r - ra));
    std::copy(b.begin(), b.end(), pb.begin() + (r - rb));
    for (int i = 0; i < r; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                                 " with " + shape_str(b));
        plan.out[i] = std::max(pa[i], pb[i]);
    }
    const auto sta = row_major_strides(pa);
    const auto stb = row_major_strides(pb);
    plan.sa.resize(r);
    plan.sb.resize(r);
    for (int i = 0; i < r; ++i) {
        plan.sa[i] = pa[i] == 1 ? 0 : sta[i];
        plan.sb[i] = pb[i] == 1 ? 0 : stb[i];
    }
    return plan;
}

template <typename F>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, const char* op, F f) {
    require_same_dtype(a, b, op);
    const ConstView va = cview(a);
    const ConstView vb = cview(b);
    if (a.shape() == b.shape()) {  // fast path
        Tensor out(a.shape(), a.dtype());
        MutView vo = mview(out);
        const std::int64_t n = out.size();
        for (std::int64_t i = 0; i < n; ++i) vo.set(i, f(va[i], vb[i]));
        check_finite(out, op);
        return out;
    }
    const BcastPlan plan = broadcast_plan(a.shape(), b.shape(), op);
    Tensor out(plan.out, a.dtype());
    MutView vo = mview(out);
    const int r = static_cast<int>(plan.out.size());
    const std::int64_t n = out.size();
    std::vector<int> idx(r, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t e = 0; e < n; ++e) {
        vo.set(e, f(va[oa], vb[ob]));
        for (int ax = r - 1; ax >= 0; --ax) {
            ++idx[ax];
            oa += plan.sa[ax];
            ob += plan.sb[ax];
            if (idx[ax] < plan.out[ax]) break;
            idx[ax] = 0;
            oa -= plan.sa[ax] * plan.out[ax];
            ob -= plan.sb[ax] * plan.out[ax];
        }
    }
    check_finite(out, op);
    return out;
}

// Sums a gradient of broadcast shape back down to the target shape.
Tensor reduce_to(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    const int rg = g.rank();
    const int rt = static_cast<int>(target.size());
    Shape padded(rg, 1);
    std::copy(target.begin(), target.end(), padded.begin() + (rg - rt));
    const auto st = row_major_strides(padded);
    std::vector<std::int64_t> strides(rg);
    for (int i = 0; i < rg; ++i) strides[i] = padded[i] == 1 ? 0 : st[i];

    Tensor out(target.empty() ? Shape{} : target, g.dtype());
    MutView vo = mview(out);
    const ConstView vg = cview(g);
    const std::int64_t n = g.size();
    const Shape& gs = g.shape();
    std::vector<int> idx(rg, 0);
    std::int64_t ot = 0;
    for (std::int64_t e = 0; e < n; ++e) {
        vo.acc(ot, vg[e]);
        for (int ax = rg - 1; ax >= 0; --ax) {
            ++idx[ax];
            ot += strides[ax];
            if (idx[ax] < gs[ax]) break;
            idx[ax] = 0;
            ot -= strides[ax] * gs[ax];
        }
    }
    return out;
}

template <typename F>
Tensor map_unary(const Tensor& a, const char* op, F f) {
    Tensor out(a.shape(), a.dtype());
    const ConstView vi = cview(a);
    MutView vo = mview(out);
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) vo.set(i, f(vi[i]));
    check_finite(out, op);
    return out;
}

// Eager same-shape combine used inside backward closures.
template <typename F>
Tensor zip_eager(const Tensor& a, const Tensor& b, F f) {
    Tensor out(a.shape(), a.dtype());
    const ConstView va = cview(a);
    const ConstView vb = cview(b);
    MutView vo = mview(out);
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) vo.set(i, f(va[i], vb[i]));
    return out;
}

template <typename T>
void matmul_kernel(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::int64_t>(i) * k;
        T* crow = c + static_cast<std::int64_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + static_cast<std::int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

// ----- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
    validate_shape(shape_);
    const std::int64_t n = shape_numel(shape_);
    if (dtype_ == DType::F64)
        d64_ = std::make_shared<std::vector<double>>(static_cast<size_t>(n), 0.0);
    else
        d32_ = std::make_shared<std::vector<float>>(static_cast<size_t>(n), 0.0f);
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t(std::move(shape), dtype);
    MutView v = mview(t);
    const std::int64_t n = t.size();
    for (std::int64_t i = 0; i < n; ++i) v.set(i, value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw DimensionError("from: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = DType::F64;
    t.d64_ = std::make_shared<std::vector<double>>(std::move(values));
    check_finite(t, "from");
    return t;
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::eye(int n) {
    if (n <= 0) throw DimensionError("eye: order must be positive");
    Tensor t(Shape{n, n});
    double* p = t.mut64();
    for (int i = 0; i < n; ++i) p[static_cast<std::int64_t>(i) * n + i] = 1.0;
    return t;
}

int Tensor::dim(int axis) const {
    return shape_[normalize_axis(axis, rank(), "dim")];
}

std::int64_t Tensor::size() const {
    if (!defined()) return 0;
    return shape_numel(shape_);
}

double Tensor::flat(std::int64_t i) const {
    return dtype_ == DType::F64 ? (*d64_)[static_cast<size_t>(i)]
                                : static_cast<double>((*d32_)[static_cast<size_t>(i)]);
}

void Tensor::set_flat(std::int64_t i, double v) {
    if (node_) throw ContractError("set_flat: tracked tensors are immutable");
    ensure_unique();
    if (dtype_ == DType::F64)
        (*d64_)[static_cast<size_t>(i)] = v;
    else
        (*d32_)[static_cast<size_t>(i)] = static_cast<float>(v);
}

double Tensor::at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank())
        throw DimensionError("at: index rank mismatch for " + shape_str(shape_));
    const auto strides = row_major_strides(shape_);
    std::int64_t off = 0;
    int ax = 0;
    for (int i : idx) {
        if (i < 0 || i >= shape_[ax])
            throw DimensionError("at: index out of bounds for " + shape_str(shape_));
        off += strides[ax] * i;
        ++ax;
    }
    return flat(off);
}

void Tensor::set(std::initializer_list<int> idx, double v) {
    if (static_cast<int>(idx.size()) != rank())
        throw DimensionError("set: index rank mismatch for " + shape_str(shape_));
    const auto strides = row_major_strides(shape_);
    std::int64_t off = 0;
    int ax = 0;
    for (int i : idx) {
        if (i < 0 || i >= shape_[ax])
            throw DimensionError("set: index out of bounds for " + shape_str(shape_));
        off += strides[ax] * i;
        ++ax;
    }
    set_flat(off, v);
}

Tensor Tensor::to(DType target) const {
    if (node_) throw ContractError("to: detach before converting dtype");
    if (target == dtype_) return *this;
    Tensor out(shape_, target);
    const ConstView vi = cview(*this);
    MutView vo = mview(out);
    const std::int64_t n = size();
    for (std::int64_t i = 0; i < n; ++i) vo.set(i, vi[i]);
    return out;
}

Tensor Tensor::detach() const {
    Tensor t = *this;
    t.node_.reset();
    return t;
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<size_t>(size()));
    const ConstView v = cview(*this);
    for (std::int64_t i = 0; i < size(); ++i) out[static_cast<size_t>(i)] = v[i];
    return out;
}

const double* Tensor::data64() const {
    if (dtype_ != DType::F64 || !d64_) throw ContractError("data64: tensor is not F64");
    return d64_->data();
}

const float* Tensor::data32() const {
    if (dtype_ != DType::F32 || !d32_) throw ContractError("data32: tensor is not F32");
    return d32_->data();
}

double* Tensor::mut64() {
    if (dtype_ != DType::F64 || !d64_) throw ContractError("mut64: tensor is not F64");
    if (node_) throw ContractError("mut64: tracked tensors are immutable");
    ensure_unique();
    return d64_->data();
}

float* Tensor::mut32() {
    if (dtype_ != DType::F32 || !d32_) throw ContractError("mut32: tensor is not F32");
    if (node_) throw ContractError("mut32: tracked tensors are immutable");
    ensure_unique();
    return d32_->data();
}

void Tensor::ensure_unique() {
    if (d64_ && d64_.use_count() > 1) d64_ = std::make_shared<std::vector<double>>(*d64_);
    if (d32_ && d32_.use_count() > 1) d32_ = std::make_shared<std::vector<float>>(*d32_);
}

// ----- Tape ------------------------------------------------------------------

int Tape::index_of(const std::string& name) const {
    for (size_t i = 0; i < order_.size(); ++i)
        if (order_[i] == name) return static_cast<int>(i);
    return -1;
}

Tensor Tape::param(const std::string& name, Tensor init) {
    if (name.empty()) throw ContractError("param: name must be non-empty");
    if (index_of(name) >= 0) throw ContractError("param: duplicate name " + name);
    if (!init.defined()) throw ContractError("param: undefined init for " + name);
    if (init.dtype() != DType::F64)
        throw ContractError("param: gradients require F64, got F32 for " + name);
    Tensor leaf = init.detach();
    auto node = std::make_shared<autodiff::Node>();
    node->param_name = name;
    leaf.set_node(std::move(node));
    order_.push_back(name);
    values_.push_back(leaf);
    return leaf;
}

bool Tape::has_param(const std::string& name) const { return index_of(name) >= 0; }

Tensor Tape::param_value(const std::string& name) const {
    const int i = index_of(name);
    if (i < 0) throw ContractError("param_value: unknown parameter " + name);
    return values_[static_cast<size_t>(i)];
}

void Tape::set_param_value(const std::string& name, Tensor value) {
    const int i = index_of(name);
    if (i < 0) throw ContractError("set_param_value: unknown parameter " + name);
    if (value.shape() != values_[static_cast<size_t>(i)].shape())
        throw ContractError("set_param_value: shape change for " + name);
    if (value.dtype() != DType::F64)
        throw ContractError("set_param_value: gradients require F64 for " + name);
    Tensor leaf = value.detach();
    auto node = std::make_shared<autodiff::Node>();
    node->param_name = name;
    leaf.set_node(std::move(node));
    values_[static_cast<size_t>(i)] = leaf;
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    if (!loss.node())
        throw ContractError("backward: loss is not connected to any tracked parameter");
    NoGradGuard no_recording;

    // Post-order DFS; the reverse is a topological order with every consumer
    // ahead of its producers, so each node is expanded exactly once with its
    // full upstream gradient.
    std::vector<autodiff::Node*> order;
    std::unordered_set<autodiff::Node*> seen;
    std::vector<std::pair<autodiff::Node*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& top = stack.back();
        if (top.second < top.first->parents.size()) {
            autodiff::Node* p = top.first->parents[top.second].get();
            ++top.second;
            if (p && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(top.first);
            stack.pop_back();
        }
    }

    loss.node()->grad = Tensor::full(loss.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        autodiff::Node* n = *it;
        if (n->backprop && n->grad.defined()) n->backprop(n->grad);
    }
}

Tensor Tape::grad(const std::string& name) const {
    const int i = index_of(name);
    if (i < 0) throw ContractError("grad: unknown parameter " + name);
    const Tensor& value = values_[static_cast<size_t>(i)];
    if (value.node() && value.node()->grad.defined()) return value.node()->grad;
    return Tensor(value.shape(), DType::F64);
}

void Tape::zero_grad() {
    for (auto& value : values_)
        if (value.node()) value.node()->grad = Tensor();
}

// ----- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    if (a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    require_same_dtype(a, b, "matmul");
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    FlopCounter::add(static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(k) *
                     static_cast<std::uint64_t>(n));
    Tensor out(Shape{m, n}, a.dtype());
    if (a.dtype() == DType::F64)
        matmul_kernel<double>(a.data64(), b.data64(), out.mut64(), m, k, n);
    else
        matmul_kernel<float>(a.data32(), b.data32(), out.mut32(), m, k, n);
    check_finite(out, "matmul");

    auto an = a.node();
    auto bn = b.node();
    if (g_grad_enabled && (an || bn)) {
        const Tensor av = a.detach();
        const Tensor bv = b.detach();
        attach(out, collect_parents({an, bn}), [an, bn, av, bv](const Tensor& up) {
            if (an) autodiff::accumulate(an, matmul(up, transpose(bv)));
            if (bn) autodiff::accumulate(bn, matmul(transpose(av), up));
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: expects rank 2, got " + shape_str(a.shape()));
    const int m = a.shape()[0], n = a.shape()[1];
    Tensor out(Shape{n, m}, a.dtype());
    const ConstView vi = cview(a);
    MutView vo = mview(out);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            vo.set(static_cast<std::int64_t>(j) * m + i, vi[static_cast<std::int64_t>(i) * n + j]);

    if (auto an = a.node(); g_grad_enabled && an) {
        attach(out, {an}, [an](const Tensor& up) {
            autodiff::accumulate(an, transpose(up));
        });
    }
    return out;
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    const int r = a.rank();
    if (static_cast<int>(perm.size()) != r)
        throw DimensionError("permute: order must name every axis once");
    std::vector<bool> hit(static_cast<size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || hit[static_cast<size_t>(p)])
            throw DimensionError("permute: order must name every axis once");
        hit[static_cast<size_t>(p)] = true;
    }
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = a.shape()[perm[static_cast<size_t>(i)]];
    Tensor out(out_shape, a.dtype());
    const auto src_strides = row_major_strides(a.shape());
    std::vector<std::int64_t> step(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) step[static_cast<size_t>(i)] = src_strides[perm[static_cast<size_t>(i)]];

    const ConstView vi = cview(a);
    MutView vo = mview(out);
    const std::int64_t n = out.size();
    std::vector<int> idx(static_cast<size_t>(r), 0);
    std::int64_t src = 0;
    for (std::int64_t e = 0; e < n; ++e) {
        vo.set(e, vi[src]);
        for (int ax = r - 1; ax >= 0; --ax) {
            ++idx[static_cast<size_t>(ax)];
            src += step[static_cast<size_t>(ax)];
            if (idx[static_cast<size_t>(ax)] < out_shape[static_cast<size_t>(ax)]) break;
            idx[static_cast<size_t>(ax)] = 0;
            src -= step[static_cast<size_t>(ax)] * out_shape[static_cast<size_t>(ax)];
        }
    }

    if (auto an = a.node(); g_grad_enabled && an) {
        std::vector<int> inverse(static_cast<size_t>(r));
        for (int i = 0; i < r; ++i) inverse[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
        attach(out, {an}, [an, inverse](const Tensor& up) {
            autodiff::accumulate(an, permute(up, inverse));
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    validate_shape(shape);
    if (shape_numel(shape) != a.size())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " does not hold " +
                             shape_str(shape));
    Tensor out(shape, a.dtype());
    const ConstView vi = cview(a);
    MutView vo = mview(out);
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) vo.set(i, vi[i]);

    if (auto an = a.node(); g_grad_enabled && an) {
        const Shape original = a.shape();
        attach(out, {an}, [an, original](const Tensor& up) {
            autodiff::accumulate(an, reshape(up, original));
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = binary_broadcast(a, b, "add", [](double x, double y) { return x + y; });
    auto an = a.node();
    auto bn = b.node();
    if (g_grad_enabled && (an || bn)) {
        const Shape sa = a.shape(), sb = b.shape();
        attach(out, collect_parents({an, bn}), [an, bn, sa, sb](const Tensor& up) {
            if (an) autodiff::accumulate(an, reduce_to(up, sa));
            if (bn) autodiff::accumulate(bn, reduce_to(up, sb));
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Tensor out = binary_broadcast(a, b, "sub", [](double x, double y) { return x - y; });
    auto an = a.node();
    auto bn = b.node();
    if (g_grad_enabled && (an || bn)) {
        const Shape sa = a.shape(), sb = b.shape();
        attach(out, collect_parents({an, bn}), [an, bn, sa, sb](const Tensor& up) {
            if (an) autodiff::accumulate(an, reduce_to(up, sa));
            if (bn) autodiff::accumulate(bn, scale(reduce_to(up, sb), -1.0));
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Tensor out = binary_broadcast(a, b, "mul", [](double x, double y) { return x * y; });
    auto an = a.node();
    auto bn = b.node();
    if (g_grad_enabled && (an || bn)) {
        const Tensor av = a.detach(), bv = b.detach();
        attach(out, collect_parents({an, bn}), [an, bn, av, bv](const Tensor& up) {
            if (an)
                autodiff::accumulate(
                    an, reduce_to(binary_broadcast(up, bv, "mul_bw",
                                                   [](double u, double y) { return u * y; }),
                                  av.shape()));
            if (bn)
                autodiff::accumulate(
                    bn, reduce_to(binary_broadcast(up, av, "mul_bw",
                                                   [](double u, double x) { return u * x; }),
                                  bv.shape()));
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = map_unary(a, "scale", [s](double x) { return x * s; });
    if (auto an = a.node(); g_grad_enabled && an) {
        attach(out, {an}, [an, s](const Tensor& up) {
            autodiff::accumulate(an, scale(up, s));
        });
    }
    return out;
}

Tensor exp(const Tensor& a) {
    Tensor out = map_unary(a, "exp", [](double x) { return std::exp(x); });
    if (auto an = a.node(); g_grad_enabled && an) {
        const Tensor ov = out.detach();
        attach(out, {an}, [an, ov](const Tensor& up) {
            autodiff::accumulate(an, zip_eager(up, ov, [](double u, double y) { return u * y; }));
        });
    }
    return out;
}

Tensor log(const Tensor& a) {
    Tensor out = map_unary(a, "log", [](double x) { return std::log(x); });
    if (auto an = a.node(); g_grad_enabled && an) {
        const Tensor av = a.detach();
        attach(out, {an}, [an, av](const Tensor& up) {
            autodiff::accumulate(an, zip_eager(up, av, [](double u, double x) { return u / x; }));
        });
    }
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out = map_unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; });
    if (auto an = a.node(); g_grad_enabled && an) {
        const Tensor av = a.detach();
        attach(out, {an}, [an, av](const Tensor& up) {
            autodiff::accumulate(
                an, zip_eager(up, av, [](double u, double x) { return x > 0.0 ? u : 0.0; }));
        });
    }
    return out;
}

Tensor abs(const Tensor& a) {
    Tensor out = map_unary(a, "abs", [](double x) { return std::abs(x); });
    if (auto an = a.node(); g_grad_enabled && an) {
        const Tensor av = a.detach();
        attach(out, {an}, [an, av](const Tensor& up) {
            autodiff::accumulate(an, zip_eager(up, av, [](double u, double x) {
                                     return x > 0.0 ? u : (x < 0.0 ? -u : 0.0);
                                 }));
        });
    }
    return out;
}

Tensor clamp_min(const Tensor& a, double lo) {
    Tensor out = map_unary(a, "clamp_min", [lo](double x) { return x < lo ? lo : x; });
    if (auto an = a.node(); g_grad_enabled && an) {
        const Tensor av = a.detach();
        attach(out, {an}, [an, av, lo](const Tensor& up) {
            autodiff::accumulate(
                an, zip_eager(up, av, [lo](double u, double x) { return x > lo ? u : 0.0; }));
        });
    }
    return out;
}

namespace {

// Shared outer/axis/inner walk for axis-wise ops.
struct AxisSpan {
    std::int64_t outer, extent, inner;
};

AxisSpan axis_span(const Shape& shape, int axis) {
    AxisSpan s{1, shape[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
    if (a.rank() == 0) throw DimensionError("softmax: rank-0 input has no axis");
    const int ax = normalize_axis(axis, a.rank(), "softmax");
    const AxisSpan span = axis_span(a.shape(), ax);
    Tensor out(a.shape(), a.dtype());
    const ConstView vi = cview(a);
    MutView vo = mview(out);
    for (std::int64_t o = 0; o < span.outer; ++o) {
        for (std::int64_t in = 0; in < span.inner; ++in) {
            const std::int64_t base = o * span.extent * span.inner + in;
            double mx = vi[base];
            for (std::int64_t k = 1; k < span.extent; ++k)
                mx = std::max(mx, vi[base + k * span.inner]);
            double denom = 0.0;
            for (std::int64_t k = 0; k < span.extent; ++k)
                denom += std::exp(vi[base + k * span.inner] - mx);
            for (std::int64_t k = 0; k < span.extent; ++k)
                vo.set(base + k * span.inner, std::exp(vi[base + k * span.inner] - mx) / denom);
        }
    }
    check_finite(out, "softmax");

    if (auto an = a.node(); g_grad_enabled && an) {
        const Tensor ov = out.detach();
        const AxisSpan sp = span;
        attach(out, {an}, [an, ov, sp](const Tensor& up) {
            Tensor g(ov.shape(), ov.dtype());
            const ConstView vy = cview(ov);
            const ConstView vu = cview(up);
            MutView vg = mview(g);
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                for (std::int64_t in = 0; in < sp.inner; ++in) {
                    const std::int64_t base = o * sp.extent * sp.inner + in;
                    double dot = 0.0;
                    for (std::int64_t k = 0; k < sp.extent; ++k) {
                        const std::int64_t at = base + k * sp.inner;
                        dot += vu[at] * vy[at];
                    }
                    for (std::int64_t k = 0; k < sp.extent; ++k) {
                        const std::int64_t at = base + k * sp.inner;
                        vg.set(at, vy[at] * (vu[at] - dot));
                    }
                }
            }
            autodiff::accumulate(an, g);
        });
    }
    return out;
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
    if (a.rank() == 0) throw DimensionError("sum: rank-0 input has no axis");
    const int ax = normalize_axis(axis, a.rank(), "sum");
    const AxisSpan span = axis_span(a.shape(), ax);
    Shape out_shape;
    for (int i = 0; i < a.rank(); ++i) {
        if (i == ax) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(a.shape()[static_cast<size_t>(i)]);
        }
    }
    Tensor out(out_shape, a.dtype());
    const ConstView vi = cview(a);
    MutView vo = mview(out);
    for (std::int64_t o = 0; o < span.outer; ++o) {
        for (std::int64_t in = 0; in < span.inner; ++in) {
            double acc = 0.0;
            const std::int64_t base = o * span.extent * span.inner + in;
            for (std::int64_t k = 0; k < span.extent; ++k) acc += vi[base + k * span.inner];
            vo.set(o * span.inner + in, acc);
        }
    }
    check_finite(out, "sum");

    if (auto an = a.node(); g_grad_enabled && an) {
        const AxisSpan sp = span;
        const Shape in_shape = a.shape();
        attach(out, {an}, [an, sp, in_shape](const Tensor& up) {
            Tensor g(in_shape, up.dtype());
            const ConstView vu = cview(up);
            MutView vg = mview(g);
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                for (std::int64_t in = 0; in < sp.inner; ++in) {
                    const double u = vu[o * sp.inner + in];
                    const std::int64_t base = o * sp.extent * sp.inner + in;
                    for (std::int64_t k = 0; k < sp.extent; ++k) vg.set(base + k * sp.inner, u);
                }
            }
            autodiff::accumulate(an, g);
        });
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    const ConstView vi = cview(a);
    double acc = 0.0;
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) acc += vi[i];
    if (!std::isfinite(acc)) throw NumericError("sum_all produced a non-finite value");
    Tensor out = a.dtype() == DType::F64 ? Tensor::scalar(acc) : Tensor::scalar(acc).to(DType::F32);

    if (auto an = a.node(); g_grad_enabled && an) {
        const Shape in_shape = a.shape();
        attach(out, {an}, [an, in_shape](const Tensor& up) {
            autodiff::accumulate(an, Tensor::full(in_shape, up.flat(0), up.dtype()));
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& indices) {
    if (a.rank() < 1) throw DimensionError("gather_rows: expects rank >= 1");
    if (indices.empty()) throw DimensionError("gather_rows: index list is empty");
    const int rows = a.shape()[0];
    for (int i : indices)
        if (i < 0 || i >= rows)
            throw DimensionError("gather_rows: index " + std::to_string(i) +
                                 " out of range for " + shape_str(a.shape()));
    const std::int64_t row_size = a.size() / rows;
    Shape out_shape = a.shape();
    out_shape[0] = static_cast<int>(indices.size());
    Tensor out(out_shape, a.dtype());
    const ConstView vi = cview(a);
    MutView vo = mview(out);
    for (size_t r = 0; r < indices.size(); ++r) {
        const std::int64_t src = static_cast<std::int64_t>(indices[r]) * row_size;
        const std::int64_t dst = static_cast<std::int64_t>(r) * row_size;
        for (std::int64_t i = 0; i < row_size; ++i) vo.set(dst + i, vi[src + i]);
    }

    if (auto an = a.node(); g_grad_enabled && an) {
        const Shape in_shape = a.shape();
        const std::vector<int> idx = indices;
        attach(out, {an}, [an, in_shape, idx, row_size](const Tensor& up) {
            Tensor g(in_shape, up.dtype());
            const ConstView vu = cview(up);
            MutView vg = mview(g);
            for (size_t r = 0; r < idx.size(); ++r) {
                const std::int64_t dst = static_cast<std::int64_t>(idx[r]) * row_size;
                const std::int64_t src = static_cast<std::int64_t>(r) * row_size;
                for (std::int64_t i = 0; i < row_size; ++i) vg.acc(dst + i, vu[src + i]);
            }
            autodiff::accumulate(an, g);
        });
    }
    return out;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    require_same_dtype(a, b, "concat");
    if (a.rank() != b.rank()) throw DimensionError("concat: rank mismatch");
    const int ax = normalize_axis(axis, a.rank(), "concat");
    for (int i = 0; i < a.rank(); ++i)
        if (i != ax && a.shape()[static_cast<size_t>(i)] != b.shape()[static_cast<size_t>(i)])
            throw DimensionError("concat: shapes disagree off the join axis, " +
                                 shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(ax)] += b.shape()[static_cast<size_t>(ax)];
    Tensor out(out_shape, a.dtype());

    const AxisSpan sa = axis_span(a.shape(), ax);
    const AxisSpan sb = axis_span(b.shape(), ax);
    const ConstView va = cview(a);
    const ConstView vb = cview(b);
    MutView vo = mview(out);
    const std::int64_t joint = sa.extent + sb.extent;
    for (std::int64_t o = 0; o < sa.outer; ++o) {
        for (std::int64_t k = 0; k < sa.extent; ++k)
            for (std::int64_t in = 0; in < sa.inner; ++in)
                vo.set((o * joint + k) * sa.inner + in, va[(o * sa.extent + k) * sa.inner + in]);
        for (std::int64_t k = 0; k < sb.extent; ++k)
            for (std::int64_t in = 0; in < sb.inner; ++in)
                vo.set((o * joint + sa.extent + k) * sb.inner + in,
                       vb[(o * sb.extent + k) * sb.inner + in]);
    }

    auto an = a.node();
    auto bn = b.node();
    if (g_grad_enabled && (an || bn)) {
        const int a_extent = a.shape()[static_cast<size_t>(ax)];
        const int b_extent = b.shape()[static_cast<size_t>(ax)];
        attach(out, collect_parents({an, bn}), [an, bn, ax, a_extent, b_extent](const Tensor& up) {
            if (an) autodiff::accumulate(an, slice(up, ax, 0, a_extent));
            if (bn) autodiff::accumulate(bn, slice(up, ax, a_extent, b_extent));
        });
    }
    return out;
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
    const int ax = normalize_axis(axis, a.rank(), "slice");
    const int extent = a.shape()[static_cast<size_t>(ax)];
    if (len <= 0 || start < 0 || start + len > extent)
        throw DimensionError("slice: window [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") exceeds extent " +
                             std::to_string(extent));
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(ax)] = len;
    Tensor out(out_shape, a.dtype());
    const AxisSpan span = axis_span(a.shape(), ax);
    const ConstView vi = cview(a);
    MutView vo = mview(out);
    for (std::int64_t o = 0; o < span.outer; ++o)
        for (std::int64_t k = 0; k < len; ++k)
            for (std::int64_t in = 0; in < span.inner; ++in)
                vo.set((o * len + k) * span.inner + in,
                       vi[(o * span.extent + start + k) * span.inner + in]);

    if (auto an = a.node(); g_grad_enabled && an) {
        const Shape in_shape = a.shape();
        const AxisSpan sp = span;
        attach(out, {an}, [an, in_shape, sp, start, len](const Tensor& up) {
            Tensor g(in_shape, up.dtype());
            const ConstView vu = cview(up);
            MutView vg = mview(g);
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t k = 0; k < len; ++k)
                    for (std::int64_t in = 0; in < sp.inner; ++in)
                        vg.set((o * sp.extent + start + k) * sp.inner + in,
                               vu[(o * len + k) * sp.inner + in]);
            autodiff::accumulate(an, g);
        });
    }
    return out;
}

Tensor mlp(const Tensor& x, const std::vector<MlpLayer>& layers) {
    if (layers.empty()) throw ContractError("mlp: needs at least one layer");
    if (x.rank() != 2) throw DimensionError("mlp: expects rank-2 input");
    Tensor h = x;
    for (size_t i = 0; i < layers.size(); ++i) {
        const MlpLayer& layer = layers[i];
        if (layer.b.rank() != 1 || layer.w.rank() != 2 ||
            layer.b.shape()[0] != layer.w.shape()[1])
            throw DimensionError("mlp: layer " + std::to_string(i) + " weights are inconsistent");
        h = add(matmul(h, layer.w), layer.b);
        if (i + 1 < layers.size()) h = relu(h);
    }
    return h;
}

}  // namespace lanedet
