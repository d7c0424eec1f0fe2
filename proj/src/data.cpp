#include "dfcil/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dfcil::data {

std::vector<int> TaskSchedule::cumulative(int n_exclusive) const {
    std::vector<int> out;
    for (int i = 0; i < n_exclusive && i < num_tasks(); ++i) {
        out.insert(out.end(), tasks[i].begin(), tasks[i].end());
    }
    return out;
}

TaskSchedule build_task_schedule(int num_classes, int num_tasks, uint64_t seed) {
    if (num_classes <= 0 || num_tasks <= 0) {
        throw ConfigError("build_task_schedule: num_classes and num_tasks must be positive");
    }
    if (num_classes % num_tasks != 0) {
        throw ConfigError("build_task_schedule: num_classes " + std::to_string(num_classes) +
                          " is not divisible by num_tasks " + std::to_string(num_tasks));
    }
    TaskSchedule s;
    s.seed = seed;
    s.num_classes = num_classes;
    s.class_order.resize(static_cast<size_t>(num_classes));
    for (int i = 0; i < num_classes; ++i) s.class_order[static_cast<size_t>(i)] = i;
    Rng rng(mix_seed(seed, 0x5c4edu));
    rng.shuffle(s.class_order);
    const int per = num_classes / num_tasks;
    s.tasks.resize(static_cast<size_t>(num_tasks));
    for (int t = 0; t < num_tasks; ++t) {
        s.tasks[static_cast<size_t>(t)].assign(s.class_order.begin() + t * per,
                                               s.class_order.begin() + (t + 1) * per);
    }
    return s;
}

LabeledDataset task_subset(const LabeledDataset& ds, const std::vector<int>& classes) {
    if (classes.empty()) throw std::invalid_argument("task_subset: empty class set");
    std::set<int> want;
    for (int c : classes) {
        if (c < 0 || c >= ds.num_classes) {
            throw std::invalid_argument("task_subset: class " + std::to_string(c) +
                                        " outside [0," + std::to_string(ds.num_classes) + ")");
        }
        want.insert(c);
    }
    LabeledDataset out;
    out.height = ds.height;
    out.width = ds.width;
    out.channels = ds.channels;
    out.num_classes = ds.num_classes;
    out.split = ds.split;
    const size_t isz = ds.image_size();
    for (size_t i = 0; i < ds.count(); ++i) {
        if (!want.count(ds.labels[i])) continue;
        out.labels.push_back(ds.labels[i]);
        out.images.insert(out.images.end(), ds.image(i), ds.image(i) + isz);
    }
    return out;
}

size_t CoresetStore::size() const {
    size_t n = 0;
    for (const auto& [c, imgs] : per_class) n += imgs.size();
    return n;
}

std::map<int, int> CoresetStore::class_counts() const {
    std::map<int, int> out;
    for (const auto& [c, imgs] : per_class) out[c] = static_cast<int>(imgs.size());
    return out;
}

LabeledDataset CoresetStore::as_dataset(int num_classes) const {
    LabeledDataset out;
    out.height = height;
    out.width = width;
    out.channels = channels;
    out.num_classes = num_classes;
    out.split = Split::train;
    for (int c : seen_classes) {
        auto it = per_class.find(c);
        if (it == per_class.end()) continue;
        for (const auto& img : it->second) {
            out.labels.push_back(c);
            out.images.insert(out.images.end(), img.begin(), img.end());
        }
    }
    return out;
}

void update_coreset(CoresetStore& store, const LabeledDataset& task_data, uint64_t seed) {
    if (store.capacity <= 0) {
        throw ConfigError("update_coreset: capacity must be positive, got " +
                          std::to_string(store.capacity));
    }
    if (store.height == 0) {
        store.height = task_data.height;
        store.width = task_data.width;
        store.channels = task_data.channels;
    }
    // Collect the new classes in first-appearance order.
    std::vector<int> new_classes;
    std::set<int> seen_new;
    for (int c : task_data.labels) {
        if (!seen_new.count(c)) {
            seen_new.insert(c);
            new_classes.push_back(c);
        }
    }
    for (int c : new_classes) {
        if (store.per_class.count(c)) {
            throw std::invalid_argument("update_coreset: class " + std::to_string(c) +
                                        " already stored");
        }
    }
    std::vector<int> all_classes = store.seen_classes;
    all_classes.insert(all_classes.end(), new_classes.begin(), new_classes.end());
    const int k = static_cast<int>(all_classes.size());
    const int base = store.capacity / k;
    const int rem = store.capacity % k;

    Rng rng(mix_seed(seed, 0xc0235e7ull, static_cast<uint64_t>(k)));
    const size_t isz = task_data.image_size();

    for (int idx = 0; idx < k; ++idx) {
        const int c = all_classes[static_cast<size_t>(idx)];
        const int quota = base + (idx < rem ? 1 : 0);
        auto& bucket = store.per_class[c];
        if (std::find(new_classes.begin(), new_classes.end(), c) != new_classes.end()) {
            // Sample quota images uniformly without replacement.
            std::vector<size_t> cand;
            for (size_t i = 0; i < task_data.count(); ++i) {
                if (task_data.labels[i] == c) cand.push_back(i);
            }
            rng.shuffle(cand);
            const size_t take = std::min(cand.size(), static_cast<size_t>(quota));
            for (size_t i = 0; i < take; ++i) {
                bucket.emplace_back(task_data.image(cand[i]), task_data.image(cand[i]) + isz);
            }
        } else if (static_cast<int>(bucket.size()) > quota) {
            // Drop uniformly at random down to the new quota.
            std::vector<size_t> keep(bucket.size());
            for (size_t i = 0; i < keep.size(); ++i) keep[i] = i;
            rng.shuffle(keep);
            keep.resize(static_cast<size_t>(quota));
            std::sort(keep.begin(), keep.end());
            std::vector<std::vector<double>> kept;
            kept.reserve(keep.size());
            for (size_t i : keep) kept.push_back(std::move(bucket[i]));
            bucket = std::move(kept);
        }
    }
    store.seen_classes = std::move(all_classes);
}

ChannelStats compute_channel_stats(const LabeledDataset& ds, const std::vector<int>& classes) {
    std::set<int> want(classes.begin(), classes.end());
    const int C = ds.channels;
    const size_t hw = static_cast<size_t>(ds.height) * ds.width;
    std::vector<double> sum(static_cast<size_t>(C), 0.0), sq(static_cast<size_t>(C), 0.0);
    size_t n = 0;
    for (size_t i = 0; i < ds.count(); ++i) {
        if (!want.empty() && !want.count(ds.labels[i])) continue;
        const double* img = ds.image(i);
        for (int c = 0; c < C; ++c) {
            const double* p = img + static_cast<size_t>(c) * hw;
            for (size_t j = 0; j < hw; ++j) {
                sum[static_cast<size_t>(c)] += p[j];
                sq[static_cast<size_t>(c)] += p[j] * p[j];
            }
        }
        ++n;
    }
    if (n == 0) throw std::invalid_argument("compute_channel_stats: no matching images");
    ChannelStats st;
    st.mean.resize(static_cast<size_t>(C));
    st.std.resize(static_cast<size_t>(C));
    const double count = static_cast<double>(n) * hw;
    for (int c = 0; c < C; ++c) {
        const double m = sum[static_cast<size_t>(c)] / count;
        st.mean[static_cast<size_t>(c)] = m;
        const double var = sq[static_cast<size_t>(c)] / count - m * m;
        st.std[static_cast<size_t>(c)] = std::sqrt(std::max(var, 1e-12));
    }
    return st;
}

void normalize_inplace(LabeledDataset& ds, const ChannelStats& stats) {
    const size_t hw = static_cast<size_t>(ds.height) * ds.width;
    for (size_t i = 0; i < ds.count(); ++i) {
        double* img = ds.images.data() + i * ds.image_size();
        for (int c = 0; c < ds.channels; ++c) {
            double* p = img + static_cast<size_t>(c) * hw;
            const double m = stats.mean[static_cast<size_t>(c)];
            const double s = stats.std[static_cast<size_t>(c)];
            for (size_t j = 0; j < hw; ++j) p[j] = (p[j] - m) / s;
        }
    }
}

LabeledDataset make_toy_dataset(const ToyConfig& cfg, Split split, uint64_t seed) {
    LabeledDataset ds;
    ds.height = ds.width = cfg.image;
    ds.channels = 3;
    ds.num_classes = cfg.classes;
    ds.split = split;
    const int per = split == Split::train ? cfg.train_per_class : cfg.test_per_class;
    const int H = cfg.image, W = cfg.image;
    const size_t hw = static_cast<size_t>(H) * W;
    ds.images.reserve(static_cast<size_t>(cfg.classes) * per * 3 * hw);

    for (int cls = 0; cls < cfg.classes; ++cls) {
        // Classes share one pixel domain (blob images with per-image
        // backgrounds and tints); identity lives in subtler shape
        // parameters, so cross-task embeddings stay comparable the way
        // natural image classes do.
        Rng crng(mix_seed(seed, 0x70c1a55ull, static_cast<uint64_t>(cls)));
        double color[3];
        for (double& x : color) x = crng.uniform(-0.75, 0.75);
        const double sigma = crng.uniform(1.8, 4.2);
        const double freq = crng.uniform(0.6, 2.4);
        const double phase = crng.uniform(0.0, 3.141592653589793);
        // Secondary blob shifted vertically (survives horizontal flips).
        const double dy2 = crng.uniform(-4.0, 4.0);
        const double amp2 = crng.uniform(0.0, 0.8);
        const double sigma2 = crng.uniform(1.2, 2.5);

        for (int i = 0; i < per; ++i) {
            Rng irng(mix_seed(seed, split == Split::train ? 0x7e57aull : 0x7e57bull,
                              static_cast<uint64_t>(cls), static_cast<uint64_t>(i)));
            const double cy = (H - 1) / 2.0 + irng.uniform(-2.0, 2.0);
            const double cx = (W - 1) / 2.0 + irng.uniform(-2.0, 2.0);
            const double gain = irng.uniform(0.7, 1.3);
            double bg[3], tint[3];
            for (double& x : bg) x = irng.uniform(-0.2, 0.2);
            for (double& x : tint) x = irng.uniform(-0.1, 0.1);
            for (int c = 0; c < 3; ++c) {
                const double col = color[c] + tint[c];
                for (int y = 0; y < H; ++y) {
                    for (int x = 0; x < W; ++x) {
                        const double dy = y - cy, dx = x - cx;
                        const double r = std::sqrt(dy * dy + dx * dx);
                        const double blob = std::exp(-r * r / (2.0 * sigma * sigma)) *
                                            (0.7 + 0.3 * std::cos(freq * r + phase));
                        const double dyb = y - (cy + dy2);
                        const double blob2 =
                            amp2 * std::exp(-(dyb * dyb + dx * dx) / (2.0 * sigma2 * sigma2));
                        ds.images.push_back(bg[c] + gain * (col * blob + col * blob2) +
                                            cfg.noise * irng.normal());
                    }
                }
            }
            ds.labels.push_back(cls);
        }
    }
    return ds;
}

LabeledDataset load_cifar100(const std::string& data_root, Split split) {
    const std::string fname = split == Split::train ? "train.bin" : "test.bin";
    std::ifstream f(data_root + "/cifar-100-binary/" + fname, std::ios::binary);
    if (!f) f.open(data_root + "/" + fname, std::ios::binary);
    if (!f) {
        throw ConfigError("load_cifar100: cannot open " + fname + " under data_root " + data_root);
    }
    LabeledDataset ds;
    ds.height = ds.width = 32;
    ds.channels = 3;
    ds.num_classes = 100;
    ds.split = split;
    const size_t rec = 2 + 3072;
    std::vector<unsigned char> buf(rec);
    while (f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(rec))) {
        ds.labels.push_back(buf[1]);  // fine label
        for (size_t i = 0; i < 3072; ++i) {
            ds.images.push_back(static_cast<double>(buf[2 + i]) / 255.0);
        }
    }
    if (ds.labels.empty()) throw ConfigError("load_cifar100: " + fname + " contains no records");
    return ds;
}

namespace {
constexpr uint32_t kArrayMagic = 0x52414644u;  // "DFAR"

template <class T>
void write_pod(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
void read_pod(std::ifstream& f, T& v) {
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace

void save_dataset(const LabeledDataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_dataset: cannot write " + path);
    write_pod(f, kArrayMagic);
    write_pod(f, static_cast<int32_t>(1));  // version
    write_pod(f, static_cast<int32_t>(ds.height));
    write_pod(f, static_cast<int32_t>(ds.width));
    write_pod(f, static_cast<int32_t>(ds.channels));
    write_pod(f, static_cast<int32_t>(ds.num_classes));
    write_pod(f, static_cast<int32_t>(ds.split == Split::train ? 0 : 1));
    write_pod(f, static_cast<int64_t>(ds.count()));
    f.write(reinterpret_cast<const char*>(ds.labels.data()),
            static_cast<std::streamsize>(ds.labels.size() * sizeof(int)));
    f.write(reinterpret_cast<const char*>(ds.images.data()),
            static_cast<std::streamsize>(ds.images.size() * sizeof(double)));
}

LabeledDataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_dataset: cannot open " + path);
    uint32_t magic = 0;
    int32_t version = 0, h = 0, w = 0, c = 0, m = 0, split = 0;
    int64_t count = 0;
    read_pod(f, magic);
    if (magic != kArrayMagic) throw std::runtime_error("load_dataset: bad magic in " + path);
    read_pod(f, version);
    read_pod(f, h);
    read_pod(f, w);
    read_pod(f, c);
    read_pod(f, m);
    read_pod(f, split);
    read_pod(f, count);
    LabeledDataset ds;
    ds.height = h;
    ds.width = w;
    ds.channels = c;
    ds.num_classes = m;
    ds.split = split == 0 ? Split::train : Split::test;
    ds.labels.resize(static_cast<size_t>(count));
    f.read(reinterpret_cast<char*>(ds.labels.data()),
           static_cast<std::streamsize>(ds.labels.size() * sizeof(int)));
    ds.images.resize(static_cast<size_t>(count) * ds.image_size());
    f.read(reinterpret_cast<char*>(ds.images.data()),
           static_cast<std::streamsize>(ds.images.size() * sizeof(double)));
    if (!f) throw std::runtime_error("load_dataset: truncated file " + path);
    return ds;
}

void save_coreset(const CoresetStore& store, const std::string& array_path,
                  const std::string& label_index_path) {
    LabeledDataset flat = store.as_dataset(0);
    save_dataset(flat, array_path);
    std::ofstream f(label_index_path);
    if (!f) throw std::runtime_error("save_coreset: cannot write " + label_index_path);
    f << "row\tlabel\n";
    for (size_t i = 0; i < flat.labels.size(); ++i) f << i << "\t" << flat.labels[i] << "\n";
}

CoresetStore load_coreset(const std::string& array_path, const std::string& label_index_path,
                          int capacity) {
    LabeledDataset flat = load_dataset(array_path);
    std::ifstream f(label_index_path);
    if (!f) throw std::runtime_error("load_coreset: cannot open " + label_index_path);
    CoresetStore store;
    store.capacity = capacity;
    store.height = flat.height;
    store.width = flat.width;
    store.channels = flat.channels;
    const size_t isz = flat.image_size();
    for (size_t i = 0; i < flat.count(); ++i) {
        const int c = flat.labels[i];
        if (!store.per_class.count(c)) store.seen_classes.push_back(c);
        store.per_class[c].emplace_back(flat.image(i), flat.image(i) + isz);
    }
    return store;
}

void AccessAudit::record(int task_idx, const std::vector<int>& labels) {
    auto& row = table_[task_idx];
    for (int c : labels) ++row[c];
}

std::set<int> AccessAudit::classes_read(int task_idx) const {
    std::set<int> out;
    auto it = table_.find(task_idx);
    if (it == table_.end()) return out;
    for (const auto& [c, n] : it->second) {
        if (n > 0) out.insert(c);
    }
    return out;
}

long AccessAudit::reads_of(int task_idx, int class_id) const {
    auto it = table_.find(task_idx);
    if (it == table_.end()) return 0;
    auto jt = it->second.find(class_id);
    return jt == it->second.end() ? 0 : jt->second;
}

BatchIterator::BatchIterator(const LabeledDataset& ds, int batch_size, uint64_t seed, int epoch,
                             bool augment, AccessAudit* audit, int audit_task)
    : ds_(ds),
      batch_(batch_size),
      augment_(augment),
      audit_(audit),
      audit_task_(audit_task),
      aug_rng_(mix_seed(seed, 0xa26u, static_cast<uint64_t>(epoch))) {
    if (batch_size <= 0) throw std::invalid_argument("BatchIterator: batch size must be positive");
    order_.resize(ds.count());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng shuffle_rng(mix_seed(seed, 0x5471u, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order_);
}

int BatchIterator::batches_per_epoch() const {
    return static_cast<int>((order_.size() + static_cast<size_t>(batch_) - 1) /
                            static_cast<size_t>(batch_));
}

bool BatchIterator::next(Tensor& images, std::vector<int>& labels) {
    if (cursor_ >= order_.size()) return false;
    const size_t take = std::min(static_cast<size_t>(batch_), order_.size() - cursor_);
    const int C = ds_.channels, H = ds_.height, W = ds_.width;
    const size_t hw = static_cast<size_t>(H) * W;
    images = Tensor({static_cast<int>(take), C, H, W});
    labels.resize(take);
    for (size_t b = 0; b < take; ++b) {
        const size_t idx = order_[cursor_ + b];
        labels[b] = ds_.labels[idx];
        const double* src = ds_.image(idx);
        double* dst = images.data() + b * ds_.image_size();
        if (!augment_) {
            std::copy_n(src, ds_.image_size(), dst);
            continue;
        }
        // Random horizontal flip + random crop with 4-pixel zero padding.
        const bool flip = aug_rng_.coin();
        const int dy = aug_rng_.range_int(-4, 4);
        const int dx = aug_rng_.range_int(-4, 4);
        for (int c = 0; c < C; ++c) {
            const double* sc = src + static_cast<size_t>(c) * hw;
            double* dc = dst + static_cast<size_t>(c) * hw;
            for (int y = 0; y < H; ++y) {
                const int sy = y + dy;
                for (int x = 0; x < W; ++x) {
                    const int sx0 = flip ? W - 1 - x : x;
                    const int sx = sx0 + dx;
                    dc[y * W + x] = (sy >= 0 && sy < H && sx >= 0 && sx < W)
                                        ? sc[sy * W + sx]
                                        : 0.0;
                }
            }
        }
    }
    if (audit_ && ds_.split == Split::train) audit_->record(audit_task_, labels);
    cursor_ += take;
    return true;
}

}  // namespace dfcil::data
