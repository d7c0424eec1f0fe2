#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfcil/rng.hpp"
#include "dfcil/tensor.hpp"

namespace dfcil::data {

// Raised for invalid configuration values (bad splits, capacities, keys).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Split { train, test };

// Images are stored per-sample in CHW order, already in normalized pixel
// space. Labels are global class ids in [0, num_classes).
struct LabeledDataset {
    int height = 0, width = 0, channels = 0;
    int num_classes = 0;
    Split split = Split::train;
    std::vector<double> images;  // count * C*H*W
    std::vector<int> labels;

    size_t count() const { return labels.size(); }
    size_t image_size() const { return static_cast<size_t>(channels) * height * width; }
    const double* image(size_t i) const { return images.data() + i * image_size(); }
};

// Seeded class permutation partitioned into contiguous, disjoint blocks.
struct TaskSchedule {
    uint64_t seed = 0;
    int num_classes = 0;
    std::vector<int> class_order;           // permutation of [0, M)
    std::vector<std::vector<int>> tasks;    // N blocks in schedule order

    int num_tasks() const { return static_cast<int>(tasks.size()); }
    const std::vector<int>& task(int n) const { return tasks.at(static_cast<size_t>(n)); }
    // Classes of tasks [0, n_exclusive) in schedule order.
    std::vector<int> cumulative(int n_exclusive) const;
};

TaskSchedule build_task_schedule(int num_classes, int num_tasks, uint64_t seed);

LabeledDataset task_subset(const LabeledDataset& ds, const std::vector<int>& classes);

// Class-balanced uniform random coreset for the replay baselines.
struct CoresetStore {
    int capacity = 0;
    int height = 0, width = 0, channels = 0;
    std::vector<int> seen_classes;          // in completion order
    std::map<int, std::vector<std::vector<double>>> per_class;  // class -> images

    size_t size() const;
    std::map<int, int> class_counts() const;
    // Flattens to a dataset view for training (labels from ownership).
    LabeledDataset as_dataset(int num_classes) const;
};

void update_coreset(CoresetStore& store, const LabeledDataset& task_data, uint64_t seed);

// ---- pixel normalization ----
struct ChannelStats {
    std::vector<double> mean, std;
};
ChannelStats compute_channel_stats(const LabeledDataset& ds, const std::vector<int>& classes);
void normalize_inplace(LabeledDataset& ds, const ChannelStats& stats);

// ---- dataset sources ----
struct ToyConfig {
    int classes = 20;
    int train_per_class = 200;
    int test_per_class = 50;
    int image = 16;       // square
    double noise = 0.25;  // additive pixel noise std
};
// Seeded Gaussian-blob images; already in normalized pixel space (~[-1.5, 1.5]).
LabeledDataset make_toy_dataset(const ToyConfig& cfg, Split split, uint64_t seed);

// Native CIFAR-100 binary layout (coarse label, fine label, 3072 bytes per
// record). Returns raw [0,1] pixel values; normalize separately.
LabeledDataset load_cifar100(const std::string& data_root, Split split);

// Self-describing array container (header + labels + doubles).
void save_dataset(const LabeledDataset& ds, const std::string& path);
LabeledDataset load_dataset(const std::string& path);

void save_coreset(const CoresetStore& store, const std::string& array_path,
                  const std::string& label_index_path);
CoresetStore load_coreset(const std::string& array_path, const std::string& label_index_path,
                          int capacity);

// ---- access auditing ----
// Records which real examples were served for training while each task was
// active. Coreset reads count: a stored example is still a real example.
class AccessAudit {
public:
    void record(int task_idx, const std::vector<int>& labels);
    std::set<int> classes_read(int task_idx) const;
    long reads_of(int task_idx, int class_id) const;
    const std::map<int, std::map<int, long>>& table() const { return table_; }

private:
    std::map<int, std::map<int, long>> table_;  // task -> class -> count
};

// Deterministic shuffled batches; the delivered sequence is a pure function
// of (seed, epoch). Optional flip/crop augmentation for real training data.
class BatchIterator {
public:
    BatchIterator(const LabeledDataset& ds, int batch_size, uint64_t seed, int epoch, bool augment,
                  AccessAudit* audit = nullptr, int audit_task = -1);
    bool next(Tensor& images, std::vector<int>& labels);
    int batches_per_epoch() const;

private:
    const LabeledDataset& ds_;
    int batch_;
    bool augment_;
    AccessAudit* audit_;
    int audit_task_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
    Rng aug_rng_;
};

}  // namespace dfcil::data
