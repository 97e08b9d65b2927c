#pragma once

// Dataset ingestion (IDX images), dynamic binarization, batching, and the
// conjugate linear-Gaussian generator whose exact posterior and evidence
// anchor the numerical tests.

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dist.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace amortize {

enum class RangeTag { Binary, UnitInterval, Real };

struct Dataset {
    Mat examples;  // n_examples x n_x
    RangeTag range = RangeTag::UnitInterval;
    std::string split;

    std::size_t size() const { return examples.rows; }
    std::size_t dim() const { return examples.cols; }
    Vec example(std::size_t i) const {
        return Vec(examples.row(i), examples.row(i) + examples.cols);
    }
};

namespace detail {
inline std::uint32_t read_u32_be(std::istream& in, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error(std::string("idx: truncated while reading ") + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

inline void write_u32_be(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}
}  // namespace detail

constexpr std::uint32_t kIdxImageMagic = 0x00000803;  // 2051

// Unsigned-byte image IDX container; pixels scaled to [0,1].
inline Dataset load_idx(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("idx: cannot open " + path);
    std::uint32_t magic = detail::read_u32_be(in, "magic");
    if (magic != kIdxImageMagic)
        throw std::runtime_error("idx: bad magic at offset 0 in " + path + " (got " +
                                 std::to_string(magic) + ")");
    std::uint32_t n = detail::read_u32_be(in, "count");
    std::uint32_t rows = detail::read_u32_be(in, "rows");
    std::uint32_t cols = detail::read_u32_be(in, "cols");
    Dataset d;
    d.examples = Mat(n, static_cast<std::size_t>(rows) * cols);
    std::vector<unsigned char> buf(d.examples.cols);
    for (std::uint32_t i = 0; i < n; ++i) {
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!in)
            throw std::runtime_error("idx: truncated image data at offset " +
                                     std::to_string(16 + std::size_t(i) * buf.size()));
        double* row = d.examples.row(i);
        for (std::size_t j = 0; j < buf.size(); ++j) row[j] = buf[j] / 255.0;
    }
    d.range = RangeTag::UnitInterval;
    return d;
}

inline void save_idx(const Dataset& d, std::size_t rows, std::size_t cols, const std::string& path) {
    check_dim(rows * cols == d.dim(), "save_idx geometry");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("idx: cannot write " + path);
    detail::write_u32_be(out, kIdxImageMagic);
    detail::write_u32_be(out, static_cast<std::uint32_t>(d.size()));
    detail::write_u32_be(out, static_cast<std::uint32_t>(rows));
    detail::write_u32_be(out, static_cast<std::uint32_t>(cols));
    std::vector<unsigned char> buf(d.dim());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double* row = d.examples.row(i);
        for (std::size_t j = 0; j < buf.size(); ++j)
            buf[j] = static_cast<unsigned char>(std::llround(clamp(row[j], 0.0, 1.0) * 255.0));
        out.write(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
}

// Each pixel becomes a Bernoulli draw with the pixel value as its rate.
inline Vec dynamic_binarize(const Vec& v, Rng& rng) {
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = rng.next_uniform() <= v[i] ? 1.0 : 0.0;
    return out;
}

// Shuffled index batches covering every example once; the final short
// batch is kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, Rng rng) {
    check_dim(batch_size >= 1, "batch size");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = rng.next_below(i);
        std::swap(idx[i - 1], idx[j]);
    }
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size) {
        std::size_t end = std::min(n, start + batch_size);
        out.emplace_back(idx.begin() + start, idx.begin() + end);
    }
    return out;
}

// Linear-Gaussian problem with W = Q diag(s) (orthonormal Q) and a
// constant output variance, which forces the exact posterior covariance
// to be diagonal and therefore representable by the diagonal family.
struct LinearGaussianProblem {
    Mat w;            // n_x x n_z
    Vec b;
    Vec sigma2_x;     // constant entries
    DiagGaussian prior;
    Mat xs;           // n_examples x n_x
    std::vector<DiagGaussian> posterior;  // exact, per example (variance as log_var)
    Vec evidence;                          // exact log p(x) per example

    std::size_t n_z() const { return w.cols; }
    std::size_t n_x() const { return w.rows; }
};

namespace detail {
// Gram-Schmidt columns of a random Gaussian matrix.
inline Mat random_orthonormal_cols(std::size_t n_x, std::size_t n_z, Rng& rng) {
    Mat q(n_x, n_z);
    std::vector<Vec> cols(n_z, Vec(n_x));
    for (std::size_t j = 0; j < n_z; ++j) {
        for (std::size_t i = 0; i < n_x; ++i) cols[j][i] = rng.next_normal();
        for (std::size_t p = 0; p < j; ++p) {
            double d = dot(cols[j], cols[p]);
            axpy(cols[j], -d, cols[p]);
        }
        double nrm = norm2(cols[j]);
        for (auto& v : cols[j]) v /= nrm;
    }
    for (std::size_t i = 0; i < n_x; ++i)
        for (std::size_t j = 0; j < n_z; ++j) q(i, j) = cols[j][i];
    return q;
}
}  // namespace detail

// Exact posterior and log evidence for one observation.
inline void linear_gaussian_solve(const Mat& w, const Vec& b, const Vec& sigma2_x,
                                  const DiagGaussian& prior, const Vec& x, DiagGaussian& post,
                                  double& log_evidence) {
    const std::size_t nz = w.cols, nx = w.rows;
    const double s2x = sigma2_x[0];
    // Column norms squared of W (diagonal of W^T W).
    Vec wtw(nz, 0.0);
    for (std::size_t i = 0; i < nx; ++i)
        for (std::size_t j = 0; j < nz; ++j) wtw[j] += w(i, j) * w(i, j);
    Vec resid(nx);
    for (std::size_t i = 0; i < nx; ++i) resid[i] = x[i] - b[i];
    Vec wt_resid;
    matvec_t(w, resid, wt_resid);
    post.mean.assign(nz, 0.0);
    post.log_var.assign(nz, 0.0);
    for (std::size_t j = 0; j < nz; ++j) {
        double prior_var = std::exp(prior.log_var[j]);
        double prec = 1.0 / prior_var + wtw[j] / s2x;
        double var = 1.0 / prec;
        post.mean[j] = var * (wt_resid[j] / s2x + prior.mean[j] / prior_var);
        post.log_var[j] = std::log(var);
    }
    // Marginal: x ~ N(W mu_p + b, s2x I + W diag(var_p) W^T); Woodbury and
    // the determinant lemma reduce both pieces to per-column scalars.
    Vec mean_x(nx);
    {
        Vec tmp;
        affine(w, prior.mean, b, tmp);
        mean_x = tmp;
    }
    Vec r(nx);
    for (std::size_t i = 0; i < nx; ++i) r[i] = x[i] - mean_x[i];
    Vec wt_r;
    matvec_t(w, r, wt_r);
    double logdet = static_cast<double>(nx) * std::log(s2x);
    double quad = dot(r, r) / s2x;
    for (std::size_t j = 0; j < nz; ++j) {
        double prior_var = std::exp(prior.log_var[j]);
        logdet += std::log1p(prior_var * wtw[j] / s2x);
        double prec = 1.0 / prior_var + wtw[j] / s2x;
        quad -= (wt_r[j] / s2x) * (wt_r[j] / s2x) / prec;
    }
    log_evidence = -0.5 * (static_cast<double>(nx) * kLog2Pi + logdet + quad);
}

inline LinearGaussianProblem make_linear_gaussian(std::size_t n_z, std::size_t n_x,
                                                  std::uint64_t seed, std::size_t n_examples = 16) {
    check_dim(n_x >= n_z, "make_linear_gaussian: n_x >= n_z");
    Rng rng(seed);
    Rng wr = rng.child(1);
    LinearGaussianProblem p;
    Mat q = detail::random_orthonormal_cols(n_x, n_z, wr);
    Vec scales(n_z);
    for (auto& s : scales) s = 0.5 + wr.next_uniform();  // in (0.5, 1.5]
    p.w = Mat(n_x, n_z);
    for (std::size_t i = 0; i < n_x; ++i)
        for (std::size_t j = 0; j < n_z; ++j) p.w(i, j) = q(i, j) * scales[j];
    p.b.resize(n_x);
    for (auto& v : p.b) v = wr.next_normal() * 0.3;
    double s2x = 0.5 + wr.next_uniform();
    p.sigma2_x.assign(n_x, s2x);
    p.prior.mean.resize(n_z);
    p.prior.log_var.resize(n_z);
    for (std::size_t j = 0; j < n_z; ++j) {
        p.prior.mean[j] = wr.next_normal() * 0.3;
        p.prior.log_var[j] = std::log(0.5 + wr.next_uniform());
    }
    Rng xr = rng.child(2);
    p.xs = Mat(n_examples, n_x);
    p.posterior.resize(n_examples);
    p.evidence.resize(n_examples);
    for (std::size_t e = 0; e < n_examples; ++e) {
        Vec z(n_z);
        for (std::size_t j = 0; j < n_z; ++j)
            z[j] = p.prior.mean[j] + std::exp(0.5 * p.prior.log_var[j]) * xr.next_normal();
        Vec x;
        affine(p.w, z, p.b, x);
        for (std::size_t i = 0; i < n_x; ++i) x[i] += std::sqrt(s2x) * xr.next_normal();
        for (std::size_t i = 0; i < n_x; ++i) p.xs(e, i) = x[i];
        linear_gaussian_solve(p.w, p.b, p.sigma2_x, p.prior, x, p.posterior[e], p.evidence[e]);
    }
    return p;
}

// Wraps a problem as a single-level linear generative model (one
// identity layer), so the engine's bound can be compared against the
// stored exact quantities.
inline GenerativeModel model_from_problem(const LinearGaussianProblem& p) {
    GenerativeModel m;
    m.output = OutputFamily::Gaussian;
    m.data_dim = p.n_x();
    m.latent_dims = {p.n_z()};
    Mlp dec;
    Layer l = make_layer(p.n_z(), p.n_x(), Activation::Identity);
    l.w = p.w;
    l.b = p.b;
    dec.layers.push_back(std::move(l));
    m.decoders.push_back(std::move(dec));
    m.output_log_var.resize(p.n_x());
    for (std::size_t i = 0; i < p.n_x(); ++i) m.output_log_var[i] = std::log(p.sigma2_x[i]);
    m.top_prior = p.prior;
    return m;
}

inline Dataset dataset_from_problem(const LinearGaussianProblem& p, const std::string& split = "train") {
    Dataset d;
    d.examples = p.xs;
    d.range = RangeTag::Real;
    d.split = split;
    return d;
}

// Fixture serialization: long-format CSV (field,i,j,value) so other
// tooling can replay the exact posteriors and evidences.
inline void save_problem_csv(const LinearGaussianProblem& p, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "field,i,j,value\n";
    auto emit = [&](const std::string& f, std::size_t i, std::size_t j, double v) {
        out << f << ',' << i << ',' << j << ',' << fmt(v) << '\n';
    };
    for (std::size_t i = 0; i < p.w.rows; ++i)
        for (std::size_t j = 0; j < p.w.cols; ++j) emit("W", i, j, p.w(i, j));
    for (std::size_t i = 0; i < p.b.size(); ++i) emit("b", i, 0, p.b[i]);
    for (std::size_t i = 0; i < p.sigma2_x.size(); ++i) emit("sigma2_x", i, 0, p.sigma2_x[i]);
    for (std::size_t i = 0; i < p.prior.dim(); ++i) {
        emit("prior_mean", i, 0, p.prior.mean[i]);
        emit("prior_log_var", i, 0, p.prior.log_var[i]);
    }
    for (std::size_t e = 0; e < p.xs.rows; ++e) {
        for (std::size_t i = 0; i < p.xs.cols; ++i) emit("x", e, i, p.xs(e, i));
        for (std::size_t j = 0; j < p.n_z(); ++j) {
            emit("post_mean", e, j, p.posterior[e].mean[j]);
            emit("post_log_var", e, j, p.posterior[e].log_var[j]);
        }
        emit("evidence", e, 0, p.evidence[e]);
    }
}

// Desk-scale handwritten-digit set: the bundled 8x8 UCI digit scans,
// bilinearly upsampled to 28x28 and augmented with small deterministic
// pixel shifts to reach the requested count. Drop-in compatible with any
// 28x28 IDX image file.
inline Dataset synthesize_digits(const std::string& idx_path, std::size_t count, std::uint64_t seed) {
    Dataset base = load_idx(idx_path);
    const std::size_t src = 8, dst = 28;
    check_dim(base.dim() == src * src, "digit source geometry");
    Rng rng(seed);
    Dataset out;
    out.examples = Mat(count, dst * dst);
    out.range = RangeTag::UnitInterval;
    const double scale = static_cast<double>(src) / dst;
    for (std::size_t e = 0; e < count; ++e) {
        const double* img = base.examples.row(e % base.size());
        int dx = 0, dy = 0;
        if (e >= base.size()) {
            Rng er = rng.child(stream::kData, e);
            dx = static_cast<int>(er.next_below(5)) - 2;
            dy = static_cast<int>(er.next_below(5)) - 2;
        }
        double* row = out.examples.row(e);
        for (std::size_t r = 0; r < dst; ++r) {
            for (std::size_t c = 0; c < dst; ++c) {
                double sr = (static_cast<double>(r) - dy + 0.5) * scale - 0.5;
                double sc = (static_cast<double>(c) - dx + 0.5) * scale - 0.5;
                double v = 0.0;
                if (sr > -1.0 && sr < src && sc > -1.0 && sc < src) {
                    int r0 = static_cast<int>(std::floor(sr)), c0 = static_cast<int>(std::floor(sc));
                    double fr = sr - r0, fc = sc - c0;
                    auto at = [&](int rr, int cc) -> double {
                        if (rr < 0 || cc < 0 || rr >= static_cast<int>(src) || cc >= static_cast<int>(src))
                            return 0.0;
                        return img[rr * src + cc];
                    };
                    v = (1 - fr) * ((1 - fc) * at(r0, c0) + fc * at(r0, c0 + 1)) +
                        fr * ((1 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1));
                }
                row[r * dst + c] = clamp(v, 0.0, 1.0);
            }
        }
    }
    return out;
}

}  // namespace amortize
