#include "engage/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "engage/util.hpp"

namespace engage::nn {

MatrixXd& ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw std::runtime_error("param store: duplicate tensor " + name);
    index_[name] = tensors_.size();
    tensors_.push_back({name, MatrixXd::Zero(rows, cols), MatrixXd::Zero(rows, cols)});
    return tensors_.back().value;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("param store: missing tensor " + name);
    return tensors_[it->second];
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("param store: missing tensor " + name);
    return tensors_[it->second];
}

void ParamStore::zero_grad() {
    for (auto& t : tensors_) t.grad.setZero();
}

std::size_t ParamStore::n_params() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
    return n;
}

void ParamStore::copy_matching_from(const ParamStore& other) {
    for (auto& t : tensors_) {
        if (!other.has(t.name)) continue;
        const Tensor& src = other.at(t.name);
        if (src.value.rows() == t.value.rows() && src.value.cols() == t.value.cols()) {
            t.value = src.value;
        }
    }
}

std::uint64_t ParamStore::values_hash() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& t : tensors_) {
        h = fnv1a64(t.name, h);
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(t.value.data()),
                                     static_cast<std::size_t>(t.value.size()) * sizeof(double)),
                    h);
    }
    return h;
}

void AdamW::step(ParamStore& params, double lr_scale) {
    auto& tensors = params.tensors();
    if (m_.empty()) {
        for (const auto& t : tensors) {
            m_.push_back(MatrixXd::Zero(t.value.rows(), t.value.cols()));
            v_.push_back(MatrixXd::Zero(t.value.rows(), t.value.cols()));
        }
    }
    if (m_.size() != tensors.size()) {
        throw std::runtime_error("adamw: parameter count changed under the optimizer");
    }
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    double lr = cfg_.lr * lr_scale;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto& t = tensors[i];
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * t.grad;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * t.grad.cwiseProduct(t.grad);
        MatrixXd mhat = m_[i] / bc1;
        MatrixXd vhat = v_[i] / bc2;
        t.value -= lr * (mhat.array() / (vhat.array().sqrt() + cfg_.eps)).matrix();
        if (cfg_.weight_decay > 0.0) t.value -= lr * cfg_.weight_decay * t.value;
    }
}

static constexpr double kLnEps = 1e-5;

MatrixXd layer_norm(const MatrixXd& x, const MatrixXd& gamma, const MatrixXd& beta,
                    LayerNormCache* cache) {
    const Eigen::Index n = x.rows(), d = x.cols();
    MatrixXd y(n, d);
    MatrixXd xhat(n, d);
    VectorXd rstd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double mu = x.row(i).mean();
        double var = (x.row(i).array() - mu).square().mean();
        double rs = 1.0 / std::sqrt(var + kLnEps);
        xhat.row(i) = (x.row(i).array() - mu) * rs;
        y.row(i) = xhat.row(i).cwiseProduct(gamma.row(0)) + beta.row(0);
        rstd[i] = rs;
    }
    if (cache) {
        cache->rstd = std::move(rstd);
        cache->xhat = std::move(xhat);
    }
    return y;
}

MatrixXd layer_norm_backward(const MatrixXd& dy, const LayerNormCache& cache,
                             const MatrixXd& gamma, MatrixXd& dgamma, MatrixXd& dbeta) {
    const Eigen::Index n = dy.rows(), d = dy.cols();
    MatrixXd dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::RowVectorXd g = dy.row(i).cwiseProduct(gamma.row(0));
        double mg = g.mean();
        double mgx = g.cwiseProduct(cache.xhat.row(i)).mean();
        dx.row(i) = cache.rstd[i] * (g.array() - mg - cache.xhat.row(i).array() * mgx);
        dgamma.row(0) += dy.row(i).cwiseProduct(cache.xhat.row(i));
        dbeta.row(0) += dy.row(i);
    }
    (void)d;
    return dx;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

MatrixXd gelu(const MatrixXd& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
}

MatrixXd gelu_backward(const MatrixXd& dy, const MatrixXd& x) {
    MatrixXd dx = x.unaryExpr([](double v) {
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
    });
    return dx.cwiseProduct(dy);
}

MatrixXd masked_softmax_rows(const MatrixXd& scores) {
    MatrixXd out(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        double mx = scores.row(i).maxCoeff();
        Eigen::ArrayXd e = (scores.row(i).array() - mx).exp();
        for (Eigen::Index j = 0; j < scores.cols(); ++j) {
            if (scores(i, j) <= -1e29) e[j] = 0.0;
        }
        double s = e.sum();
        out.row(i) = (e / s).matrix();
    }
    return out;
}

MatrixXd attention(const MatrixXd& q_in, const MatrixXd& kv_in, const AttentionParams& p,
                   bool causal, AttentionCache* cache) {
    const Eigen::Index d = p.wq->value.cols();
    const int nh = p.n_heads;
    const Eigen::Index dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    MatrixXd q = (q_in * p.wq->value).rowwise() + p.bq->value.row(0);
    MatrixXd k = (kv_in * p.wk->value).rowwise() + p.bk->value.row(0);
    MatrixXd v = (kv_in * p.wv->value).rowwise() + p.bv->value.row(0);

    const Eigen::Index nq = q.rows(), nk = k.rows();
    MatrixXd concat(nq, d);
    std::vector<MatrixXd> probs(static_cast<std::size_t>(nh));
    for (int h = 0; h < nh; ++h) {
        MatrixXd scores = scale * q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
        if (causal) {
            for (Eigen::Index i = 0; i < nq; ++i) {
                for (Eigen::Index j = i + 1; j < nk; ++j) scores(i, j) = -1e30;
            }
        }
        MatrixXd pr = masked_softmax_rows(scores);
        concat.middleCols(h * dh, dh) = pr * v.middleCols(h * dh, dh);
        probs[static_cast<std::size_t>(h)] = std::move(pr);
    }
    MatrixXd out = (concat * p.wo->value).rowwise() + p.bo->value.row(0);
    if (cache) {
        cache->q_in = q_in;
        cache->kv_in = kv_in;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
        cache->concat = std::move(concat);
    }
    return out;
}

void attention_backward(const MatrixXd& dout, const AttentionParams& p,
                        const AttentionCache& cache, MatrixXd& dq_in, MatrixXd& dkv_in) {
    const Eigen::Index d = p.wq->value.cols();
    const int nh = p.n_heads;
    const Eigen::Index dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    p.wo->grad += cache.concat.transpose() * dout;
    p.bo->grad.row(0) += dout.colwise().sum();
    MatrixXd dconcat = dout * p.wo->value.transpose();

    MatrixXd dq(cache.q.rows(), d), dk(cache.k.rows(), d), dv(cache.v.rows(), d);
    for (int h = 0; h < nh; ++h) {
        const MatrixXd& pr = cache.probs[static_cast<std::size_t>(h)];
        MatrixXd dOh = dconcat.middleCols(h * dh, dh);
        MatrixXd dP = dOh * cache.v.middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh) = pr.transpose() * dOh;
        // softmax backward, row-wise
        MatrixXd dS(pr.rows(), pr.cols());
        for (Eigen::Index i = 0; i < pr.rows(); ++i) {
            double dot = dP.row(i).dot(pr.row(i));
            dS.row(i) = pr.row(i).cwiseProduct(dP.row(i) - Eigen::RowVectorXd::Constant(pr.cols(), dot));
        }
        dq.middleCols(h * dh, dh) = scale * dS * cache.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = scale * dS.transpose() * cache.q.middleCols(h * dh, dh);
    }

    p.wq->grad += cache.q_in.transpose() * dq;
    p.bq->grad.row(0) += dq.colwise().sum();
    p.wk->grad += cache.kv_in.transpose() * dk;
    p.bk->grad.row(0) += dk.colwise().sum();
    p.wv->grad += cache.kv_in.transpose() * dv;
    p.bv->grad.row(0) += dv.colwise().sum();

    dq_in = dq * p.wq->value.transpose();
    dkv_in = dk * p.wk->value.transpose() + dv * p.wv->value.transpose();
}

VectorXd log_softmax_row(const VectorXd& logits) {
    double mx = logits.maxCoeff();
    double lse = std::log((logits.array() - mx).exp().sum()) + mx;
    return logits.array() - lse;
}

}  // namespace engage::nn
