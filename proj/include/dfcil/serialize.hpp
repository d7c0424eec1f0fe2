#pragma once

#include <string>

#include "dfcil/model.hpp"
#include "dfcil/synthesis.hpp"

namespace dfcil::serialize {

// Write-temp-then-rename, so partially written artifacts never appear under
// their final name.
void atomic_write_text(const std::string& path, const std::string& content);

// Self-describing checkpoint container: a JSON manifest (architecture, class
// registry per head, task index, array directory keyed by layer path)
// followed by raw little-endian doubles. Snapshots and live models share it.
void save_model(const model::IncrementalClassifier& m, int task_index, const std::string& path);

struct LoadedModel {
    model::IncrementalClassifier model;
    int task_index = 0;
};
LoadedModel load_model(const std::string& path);

// Debug-only persistence for generators (disabled by default; a generator
// never outlives its task in a normal run).
void save_generator(synthesis::SynthesisGenerator& gen, const std::string& path);

}  // namespace dfcil::serialize
