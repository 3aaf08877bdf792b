#pragma once

#include "c2v/toy_codec.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace c2v {

/// Toy pipeline front end: corpus, codec and packed units.
struct ExtractOptions {
    CorpusConfig corpus;
    std::size_t num_stages = 12;
    std::size_t codebook_size = 1024;
    int kmeans_iters = 20;
    std::uint64_t seed = 0;
    std::string out_dir;
};

struct ExtractResult {
    std::string dataset;  ///< dataset.c2v
    std::string codec;    ///< codec.c2vc
    std::string labels;   ///< labels.txt
    DatasetManifest manifest;
};

/// Synthesizes the corpus, fits the RVQ codec on all frames, encodes every
/// utterance and writes the dataset, codec and label sidecar into out_dir.
ExtractResult extract_dataset(const ExtractOptions& options);

/// Command-line entry point. Returns 0 on success, 1 on usage errors and 2 on
/// runtime errors. Normal output goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace c2v
