#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace engage::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Tensor {
    std::string name;
    MatrixXd value;
    MatrixXd grad;
};

// Named parameter tensors in fixed registration order; order defines
// checkpoint layout and optimizer state slots.
class ParamStore {
public:
    MatrixXd& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<Tensor>& tensors() { return tensors_; }
    const std::vector<Tensor>& tensors() const { return tensors_; }

    void zero_grad();
    std::size_t n_params() const;

    // Copies values for every tensor whose name and shape match.
    void copy_matching_from(const ParamStore& other);

    std::uint64_t values_hash() const;

private:
    std::vector<Tensor> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

class AdamW {
public:
    struct Config {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    explicit AdamW(Config cfg) : cfg_(cfg) {}
    void step(ParamStore& params, double lr_scale = 1.0);

private:
    Config cfg_;
    std::vector<MatrixXd> m_, v_;
    long t_ = 0;
};

// ---- layer primitives (row = sequence position) ----

struct LayerNormCache {
    VectorXd rstd;
    MatrixXd xhat;
};

MatrixXd layer_norm(const MatrixXd& x, const MatrixXd& gamma, const MatrixXd& beta,
                    LayerNormCache* cache);
MatrixXd layer_norm_backward(const MatrixXd& dy, const LayerNormCache& cache,
                             const MatrixXd& gamma, MatrixXd& dgamma, MatrixXd& dbeta);

MatrixXd gelu(const MatrixXd& x);
MatrixXd gelu_backward(const MatrixXd& dy, const MatrixXd& x);

// Row-wise softmax with max subtraction; entries <= -1e29 are masked out.
MatrixXd masked_softmax_rows(const MatrixXd& scores);

struct AttentionParams {
    Tensor* wq;
    Tensor* bq;
    Tensor* wk;
    Tensor* bk;
    Tensor* wv;
    Tensor* bv;
    Tensor* wo;
    Tensor* bo;
    int n_heads = 1;
};

struct AttentionCache {
    MatrixXd q_in, kv_in;
    MatrixXd q, k, v;
    std::vector<MatrixXd> probs;  // one (nq x nk) matrix per head
    MatrixXd concat;
};

// Multi-head attention; when causal, query row i attends key rows j <= i
// (q and kv must then cover the same positions).
MatrixXd attention(const MatrixXd& q_in, const MatrixXd& kv_in, const AttentionParams& p,
                   bool causal, AttentionCache* cache);

// Returns gradients for q_in and kv_in; parameter grads accumulate in p.
void attention_backward(const MatrixXd& dout, const AttentionParams& p,
                        const AttentionCache& cache, MatrixXd& dq_in, MatrixXd& dkv_in);

VectorXd log_softmax_row(const VectorXd& logits);

}  // namespace engage::nn
