#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lanedet/errors.hpp"

namespace lanedet {

enum class DType { F64, F32 };

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::vector<std::int64_t> row_major_strides(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace autodiff {
struct Node;
}

// Dense row-major tensor. Value-semantic: buffers are immutable and shared,
// so copies are cheap and safe to pass between threads. Element writes go
// through set_* which copy a shared buffer first. F64 is the working dtype;
// F32 exists for latency measurements and cannot carry gradients.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, DType dtype = DType::F64);  // zero-filled

    static Tensor full(Shape shape, double value, DType dtype = DType::F64);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor eye(int n);

    bool defined() const { return !shape_.empty() || d64_ || d32_; }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const;
    std::int64_t size() const;
    DType dtype() const { return dtype_; }

    double flat(std::int64_t i) const;
    void set_flat(std::int64_t i, double v);
    double at(std::initializer_list<int> idx) const;
    void set(std::initializer_list<int> idx, double v);

    Tensor to(DType target) const;
    Tensor detach() const;
    std::vector<double> to_vector() const;

    bool requires_grad() const { return node_ != nullptr; }

    // Graph plumbing; not for general use.
    const std::shared_ptr<autodiff::Node>& node() const { return node_; }
    void set_node(std::shared_ptr<autodiff::Node> n) { node_ = std::move(n); }

    const double* data64() const;
    const float* data32() const;
    double* mut64();
    float* mut32();

private:
    void ensure_unique();

    Shape shape_;
    DType dtype_ = DType::F64;
    std::shared_ptr<std::vector<double>> d64_;
    std::shared_ptr<std::vector<float>> d32_;
    std::shared_ptr<autodiff::Node> node_;
};

// Counts multiply-accumulate operations issued by matrix products (and the
// explicit dot-product loops that stand in for them). One m*k*n product adds
// m*k*n. Element-wise work and transcendental calls are not counted. The
// counter is thread-local; a Scope reads the delta across a region.
class FlopCounter {
public:
    static void add(std::uint64_t macs);
    static std::uint64_t count();
    static void reset();

    class Scope {
    public:
        Scope() : start_(FlopCounter::count()) {}
        std::uint64_t macs() const { return FlopCounter::count() - start_; }

    private:
        std::uint64_t start_;
    };
};

// Suspends graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Parameter registry plus reverse-mode driver. Operations record themselves
// onto an implicit graph whenever an input is tracked; backward() walks that
// graph once in reverse topological order and accumulates leaf gradients.
// Confine a tape and its backward pass to one thread.
class Tape {
public:
    // Registers a named parameter (F64 only) and returns the tracked leaf.
    Tensor param(const std::string& name, Tensor init);
    bool has_param(const std::string& name) const;
    Tensor param_value(const std::string& name) const;
    // Replaces the stored value with a fresh leaf under the same name.
    void set_param_value(const std::string& name, Tensor value);
    // Names in registration order.
    const std::vector<std::string>& param_names() const { return order_; }

    void backward(const Tensor& loss);  // loss must be scalar
    Tensor grad(const std::string& name) const;  // zeros when unreached
    void zero_grad();

private:
    std::vector<std::string> order_;
    std::vector<Tensor> values_;
    int index_of(const std::string& name) const;
};

// ----- operations ------------------------------------------------------
// All operations compute eagerly, validate shapes, and reject non-finite
// results. They record backward closures when recording is enabled and an
// input is tracked.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // rank 2
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor reshape(const Tensor& a, Shape shape);
Tensor add(const Tensor& a, const Tensor& b);  // numpy-style broadcast
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // broadcast
Tensor scale(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
Tensor softmax(const Tensor& a, int axis);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& a);  // scalar
Tensor gather_rows(const Tensor& a, const std::vector<int>& indices);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);

// One linear stage of an MLP: x * w + b, with b broadcast across rows.
struct MlpLayer {
    Tensor w;
    Tensor b;
};

// Applies layers in order with ReLU between stages and none after the last.
Tensor mlp(const Tensor& x, const std::vector<MlpLayer>& layers);

}  // namespace lanedet
