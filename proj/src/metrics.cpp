#include "dfcil/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dfcil::metrics {

double AccuracyMatrix::final_accuracy() const {
    if (cumulative.empty()) throw std::logic_error("AccuracyMatrix: empty");
    return cumulative.back().back();
}

double accuracy_from_logits(const LogitFn& logits, const data::LabeledDataset& test,
                            const std::vector<int>& span_classes, int eval_batch) {
    if (test.count() == 0) throw std::invalid_argument("accuracy: empty test set");
    const size_t isz = test.image_size();
    size_t correct = 0;
    for (size_t start = 0; start < test.count(); start += static_cast<size_t>(eval_batch)) {
        const size_t take = std::min(static_cast<size_t>(eval_batch), test.count() - start);
        Tensor x({static_cast<int>(take), test.channels, test.height, test.width});
        std::copy_n(test.images.data() + start * isz, take * isz, x.data());
        Tensor l = logits(x);
        const int K = l.dim(1);
        if (K != static_cast<int>(span_classes.size())) {
            throw std::invalid_argument("accuracy: logit width " + std::to_string(K) +
                                        " != span size " + std::to_string(span_classes.size()));
        }
        for (size_t b = 0; b < take; ++b) {
            const double* row = l.data() + b * static_cast<size_t>(K);
            int best = 0;
            for (int k = 1; k < K; ++k) {
                if (row[k] > row[best]) best = k;
            }
            if (span_classes[static_cast<size_t>(best)] == test.labels[start + b]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(test.count());
}

double task_accuracy(model::IncrementalClassifier& m, const data::LabeledDataset& test,
                     const std::vector<int>& classes, int last_task, int eval_batch) {
    auto subset = data::task_subset(test, classes);
    std::vector<int> span;
    for (int t = 0; t <= last_task; ++t) {
        const auto& tc = m.task_classes(t);
        span.insert(span.end(), tc.begin(), tc.end());
    }
    auto fn = [&](const Tensor& x) { return m.logits_eval(x, 0, last_task); };
    return accuracy_from_logits(fn, subset, span, eval_batch);
}

OmegaResult omega(const AccuracyMatrix& acc, const std::vector<double>& offline_prefix,
                  const std::vector<int>& task_sizes) {
    const int N = acc.tasks_done();
    if (static_cast<int>(offline_prefix.size()) < N || static_cast<int>(task_sizes.size()) < N) {
        throw std::invalid_argument("omega: offline table or task sizes shorter than task count");
    }
    for (int n = 0; n < N; ++n) {
        if (offline_prefix[static_cast<size_t>(n)] == 0.0) {
            throw std::invalid_argument("omega: offline accuracy for prefix " +
                                        std::to_string(n + 1) + " is zero");
        }
    }
    OmegaResult out;
    double running = 0.0;
    for (int i = 0; i < N; ++i) {
        int cum = 0;
        for (int n = 0; n <= i; ++n) cum += task_sizes[static_cast<size_t>(n)];
        double inner = 0.0;
        for (int n = 0; n <= i; ++n) {
            const double share = static_cast<double>(task_sizes[static_cast<size_t>(n)]) / cum;
            inner += share * acc.cumulative[static_cast<size_t>(i)][static_cast<size_t>(n)] /
                     offline_prefix[static_cast<size_t>(n)];
        }
        running += inner;
        out.trajectory.push_back(running / (i + 1));
    }
    out.omega = out.trajectory.back();
    return out;
}

namespace {
void mean_of_rows(const Tensor& z, std::vector<double>& mean) {
    const int n = z.dim(0), D = z.dim(1);
    mean.assign(static_cast<size_t>(D), 0.0);
    for (int r = 0; r < n; ++r) {
        for (int d = 0; d < D; ++d) mean[static_cast<size_t>(d)] += z.v[static_cast<size_t>(r) * D + d];
    }
    for (auto& m : mean) m /= n;
}
}  // namespace

double mid_score(const Tensor& z_ref, const Tensor& z_other) {
    if (z_ref.ndim() != 2 || z_other.ndim() != 2 || z_ref.dim(1) != z_other.dim(1)) {
        throw std::invalid_argument("mid_score: expected [n x D] samples of equal dimension");
    }
    const int n = z_ref.dim(0), D = z_ref.dim(1);
    if (n < 2 || z_other.dim(0) < 1) {
        throw std::invalid_argument("mid_score: reference needs >= 2 samples");
    }
    std::vector<double> mu_ref, mu_other;
    mean_of_rows(z_ref, mu_ref);
    mean_of_rows(z_other, mu_other);
    double acc = 0.0;
    for (int d = 0; d < D; ++d) {
        double var = 0.0;
        for (int r = 0; r < n; ++r) {
            const double diff = z_ref.v[static_cast<size_t>(r) * D + d] - mu_ref[static_cast<size_t>(d)];
            var += diff * diff;
        }
        var /= (n - 1);
        const double sd = std::sqrt(var);
        if (sd == 0.0) {
            throw std::invalid_argument("mid_score: zero reference std in dimension " +
                                        std::to_string(d));
        }
        const double num = (mu_ref[static_cast<size_t>(d)] - mu_other[static_cast<size_t>(d)]) / sd;
        acc += num * num;
    }
    return std::sqrt(acc);
}

namespace {
double sq_dist(const double* a, const double* b, int D) {
    double acc = 0.0;
    for (int d = 0; d < D; ++d) {
        const double diff = a[d] - b[d];
        acc += diff * diff;
    }
    return acc;
}
}  // namespace

double mmd_score(const Tensor& z_a, const Tensor& z_b, const MmdConfig& cfg) {
    if (z_a.ndim() != 2 || z_b.ndim() != 2 || z_a.dim(1) != z_b.dim(1)) {
        throw std::invalid_argument("mmd_score: expected [n x D] samples of equal dimension");
    }
    const int m = z_a.dim(0), n = z_b.dim(0), D = z_a.dim(1);
    if (m < 2 || n < 2) {
        throw std::invalid_argument("mmd_score: each sample needs size >= 2, got " +
                                    std::to_string(m) + " and " + std::to_string(n));
    }
    double bw2;
    if (cfg.bandwidth > 0.0) {
        bw2 = cfg.bandwidth * cfg.bandwidth;
    } else {
        // Median pairwise distance on the pooled sample.
        std::vector<double> dists;
        dists.reserve(static_cast<size_t>(m + n) * (m + n - 1) / 2);
        auto row = [&](int i) {
            return i < m ? z_a.data() + static_cast<size_t>(i) * D
                         : z_b.data() + static_cast<size_t>(i - m) * D;
        };
        for (int i = 0; i < m + n; ++i) {
            for (int j = i + 1; j < m + n; ++j) {
                dists.push_back(std::sqrt(sq_dist(row(i), row(j), D)));
            }
        }
        std::nth_element(dists.begin(), dists.begin() + static_cast<long>(dists.size() / 2),
                         dists.end());
        const double med = dists[dists.size() / 2];
        bw2 = std::max(med * med, 1e-12);
    }
    const double gamma = 1.0 / (2.0 * bw2);

    double kaa = 0.0, kbb = 0.0, kab = 0.0;
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < m; ++j) {
            if (i == j) continue;
            kaa += std::exp(-gamma * sq_dist(z_a.data() + static_cast<size_t>(i) * D,
                                             z_a.data() + static_cast<size_t>(j) * D, D));
        }
    }
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            kbb += std::exp(-gamma * sq_dist(z_b.data() + static_cast<size_t>(i) * D,
                                             z_b.data() + static_cast<size_t>(j) * D, D));
        }
    }
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            kab += std::exp(-gamma * sq_dist(z_a.data() + static_cast<size_t>(i) * D,
                                             z_b.data() + static_cast<size_t>(j) * D, D));
        }
    }
    return kaa / (static_cast<double>(m) * (m - 1)) + kbb / (static_cast<double>(n) * (n - 1)) -
           2.0 * kab / (static_cast<double>(m) * n);
}

DriftReport drift_report(model::IncrementalClassifier& m, const Tensor& real_task1,
                         const Tensor& real_task2, const Tensor& synth_task1,
                         const MmdConfig& cfg) {
    Tensor z1 = m.features_eval(real_task1);
    Tensor z2 = m.features_eval(real_task2);
    Tensor zs = m.features_eval(synth_task1);
    DriftReport out;
    out.mid_real_synth = mid_score(z1, zs);
    out.mid_real_real = mid_score(z1, z2);
    out.mmd_real_synth = mmd_score(z1, zs, cfg);
    out.mmd_real_real = mmd_score(z1, z2, cfg);
    return out;
}

void export_embeddings(model::IncrementalClassifier& m, const std::vector<TaggedSamples>& groups,
                       const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("export_embeddings: cannot write " + path);
    const int D = m.backbone().feature_dim();
    f << "dim=" << D << "\n";
    f.precision(17);
    for (const auto& g : groups) {
        if (g.labels.empty()) continue;
        Tensor z = m.features_eval(g.images);
        for (size_t r = 0; r < g.labels.size(); ++r) {
            for (int d = 0; d < D; ++d) f << z.v[r * static_cast<size_t>(D) + d] << "\t";
            f << g.labels[r] << "\t" << g.provenance << "\n";
        }
    }
}

std::vector<EmbeddingRow> parse_embeddings(const std::string& path, int* dim_out) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("parse_embeddings: cannot open " + path);
    std::string header;
    std::getline(f, header);
    if (header.rfind("dim=", 0) != 0) {
        throw std::runtime_error("parse_embeddings: missing dim header in " + path);
    }
    const int D = std::stoi(header.substr(4));
    if (dim_out) *dim_out = D;
    std::vector<EmbeddingRow> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        EmbeddingRow row;
        row.embedding.resize(static_cast<size_t>(D));
        std::string tok;
        for (int d = 0; d < D; ++d) {
            std::getline(is, tok, '\t');
            row.embedding[static_cast<size_t>(d)] = std::stod(tok);
        }
        std::getline(is, tok, '\t');
        row.label = std::stoi(tok);
        std::getline(is, row.provenance, '\t');
        rows.push_back(std::move(row));
    }
    return rows;
}

double batch_timing(const std::function<void()>& step, int warmup, int measured) {
    if (warmup < 1) throw std::invalid_argument("batch_timing: warmup must be >= 1");
    if (measured <= 0) throw std::invalid_argument("batch_timing: measured must be positive");
    for (int i = 0; i < warmup; ++i) step();
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < measured; ++i) step();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count() / measured;
}

}  // namespace dfcil::metrics
