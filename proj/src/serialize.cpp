#include "dfcil/serialize.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dfcil::serialize {

using nlohmann::json;

void atomic_write_text(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + tmp);
        f << content;
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw std::runtime_error("cannot rename " + tmp + " to " + path);
    }
}

namespace {
constexpr char kMagic[8] = {'D', 'F', 'C', 'K', 'P', 'T', '0', '1'};

void write_container(const json& manifest, const std::vector<nn::NamedTensor>& named,
                     const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + tmp);
        f.write(kMagic, sizeof(kMagic));
        const std::string m = manifest.dump();
        const uint64_t msize = m.size();
        f.write(reinterpret_cast<const char*>(&msize), sizeof(msize));
        f.write(m.data(), static_cast<std::streamsize>(m.size()));
        for (const auto& nt : named) {
            f.write(reinterpret_cast<const char*>(nt.tensor->v.data()),
                    static_cast<std::streamsize>(nt.tensor->v.size() * sizeof(double)));
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw std::runtime_error("cannot rename " + tmp + " to " + path);
    }
}

json array_directory(const std::vector<nn::NamedTensor>& named) {
    json arrays = json::array();
    for (const auto& nt : named) {
        arrays.push_back({{"name", nt.name},
                          {"shape", nt.tensor->shape},
                          {"count", nt.tensor->numel()},
                          {"param", nt.is_param}});
    }
    return arrays;
}

json read_manifest(std::ifstream& f, const std::string& path) {
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::string(magic, 8) != std::string(kMagic, 8)) {
        throw std::runtime_error("bad checkpoint magic in " + path);
    }
    uint64_t msize = 0;
    f.read(reinterpret_cast<char*>(&msize), sizeof(msize));
    std::string m(msize, '\0');
    f.read(m.data(), static_cast<std::streamsize>(msize));
    if (!f) throw std::runtime_error("truncated checkpoint manifest in " + path);
    return json::parse(m);
}

void read_arrays(std::ifstream& f, const json& arrays, std::vector<nn::NamedTensor>& named,
                 const std::string& path) {
    if (arrays.size() != named.size()) {
        throw std::runtime_error("checkpoint array count mismatch in " + path);
    }
    for (size_t i = 0; i < named.size(); ++i) {
        const auto& entry = arrays[i];
        if (entry["name"].get<std::string>() != named[i].name ||
            entry["count"].get<size_t>() != named[i].tensor->numel()) {
            throw std::runtime_error("checkpoint layout mismatch at '" + named[i].name + "' in " +
                                     path);
        }
        f.read(reinterpret_cast<char*>(named[i].tensor->v.data()),
               static_cast<std::streamsize>(named[i].tensor->numel() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("truncated checkpoint arrays in " + path);
}
}  // namespace

void save_model(const model::IncrementalClassifier& m, int task_index, const std::string& path) {
    auto& mm = const_cast<model::IncrementalClassifier&>(m);
    std::vector<nn::NamedTensor> named;
    mm.tensors(named);

    const auto dims = m.backbone().input_dims();
    json heads = json::array();
    for (int t = 0; t < m.num_tasks(); ++t) heads.push_back(m.task_classes(t));
    json manifest = {
        {"format", "dfcil-checkpoint"},
        {"task_index", task_index},
        {"backbone", model::backbone_name(m.backbone().kind())},
        {"width", m.backbone().width_hint()},
        {"dims", {dims.channels, dims.height, dims.width}},
        {"heads", heads},
        {"arrays", array_directory(named)},
    };
    write_container(manifest, named, path);
}

LoadedModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint " + path);
    const json manifest = read_manifest(f, path);
    if (manifest.value("format", "") != "dfcil-checkpoint") {
        throw std::runtime_error("not a model checkpoint: " + path);
    }
    const auto dims_j = manifest["dims"];
    model::ImageDims dims{dims_j[0].get<int>(), dims_j[1].get<int>(), dims_j[2].get<int>()};

    LoadedModel out{
        model::IncrementalClassifier(model::backbone_from_name(manifest["backbone"]), dims, 0,
                                     manifest.value("width", 0)),
        manifest["task_index"].get<int>()};
    for (const auto& classes : manifest["heads"]) {
        out.model.grow_heads(classes.get<std::vector<int>>(), 0);
    }
    std::vector<nn::NamedTensor> named;
    out.model.tensors(named);
    read_arrays(f, manifest["arrays"], named, path);
    return out;
}

void save_generator(synthesis::SynthesisGenerator& gen, const std::string& path) {
    std::vector<nn::NamedTensor> named;
    gen.tensors(named);
    const auto dims = gen.output_dims();
    json manifest = {
        {"format", "dfcil-generator"},
        {"z_dim", gen.z_dim()},
        {"dims", {dims.channels, dims.height, dims.width}},
        {"arrays", array_directory(named)},
    };
    write_container(manifest, named, path);
}

}  // namespace dfcil::serialize
