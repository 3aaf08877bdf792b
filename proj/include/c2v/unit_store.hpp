#pragma once

#include "c2v/common.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace c2v {

/// A T x N_cb matrix of discrete codec units for one utterance.
///
/// codes are stored frame-major: code(t, i) lives at codes()[t * N_cb + i].
/// Construction validates every code against its codebook size.
class CodecUnitSequence {
public:
    CodecUnitSequence() = default;
    CodecUnitSequence(std::size_t frames, std::vector<std::uint32_t> codebook_sizes, int frame_rate_hz,
                      std::vector<std::uint32_t> codes);

    std::size_t frames() const { return frames_; }
    std::size_t num_codebooks() const { return codebook_sizes_.size(); }
    int frame_rate_hz() const { return frame_rate_hz_; }
    const std::vector<std::uint32_t>& codebook_sizes() const { return codebook_sizes_; }
    std::span<const std::uint32_t> codes() const { return codes_; }

    std::uint32_t code(std::size_t t, std::size_t i) const { return codes_[t * codebook_sizes_.size() + i]; }
    std::span<const std::uint32_t> frame(std::size_t t) const {
        return std::span<const std::uint32_t>(codes_).subspan(t * num_codebooks(), num_codebooks());
    }

    /// Frames [begin, end) as a new sequence.
    CodecUnitSequence slice(std::size_t begin, std::size_t end) const;

    bool same_layout(const CodecUnitSequence& other) const {
        return frame_rate_hz_ == other.frame_rate_hz_ && codebook_sizes_ == other.codebook_sizes_;
    }

    friend bool operator==(const CodecUnitSequence&, const CodecUnitSequence&) = default;

private:
    std::size_t frames_ = 0;
    std::vector<std::uint32_t> codebook_sizes_;
    int frame_rate_hz_ = 0;
    std::vector<std::uint32_t> codes_;
};

struct NamedSequence {
    std::string id;
    CodecUnitSequence units;
};

/// Header of a packed container. Serialized as `key=value` lines.
struct DatasetManifest {
    int format_version = 1;
    std::size_t num_codebooks = 0;
    int frame_rate_hz = 0;
    std::vector<std::uint32_t> codebook_sizes;
    std::vector<std::string> utterance_ids;
    std::vector<std::uint64_t> frame_counts;
    std::uint64_t payload_bytes = 0;
    /// Bytes before the payload (magic, version, length prefix, header text).
    /// Not part of the serialized text; filled in by the reader and writer.
    std::uint64_t header_bytes = 0;
    /// Free-form provenance keys carried by derived containers (target stores).
    std::map<std::string, std::string> extra;

    std::uint64_t bits_per_frame() const;
    std::uint64_t utterance_bytes(std::size_t index) const;
    std::uint64_t total_frames() const;
    std::uint64_t total_bytes() const { return header_bytes + payload_bytes; }

    std::string to_text() const;
    static DatasetManifest from_text(const std::string& text);
};

inline constexpr char kUnitMagic[4] = {'C', '2', 'V', '1'};
inline constexpr char kTargetMagic[4] = {'C', '2', 'V', 'T'};
inline constexpr std::uint8_t kContainerVersion = 1;

/// Writes a container with an arbitrary 4-byte magic; shared by the unit
/// store and the target store.
DatasetManifest write_container(const std::string& path, const char (&magic)[4],
                                std::span<const NamedSequence> sequences,
                                const std::map<std::string, std::string>& extra = {});

/// Packs a corpus into a single-file container (magic "C2V1").
DatasetManifest pack_dataset(std::span<const NamedSequence> sequences, const std::string& out_path);

enum class LoadMode {
    /// Whole container read into RAM once.
    in_memory,
    /// Each unpack opens the file and seeks to the utterance.
    seek,
};

/// Read-only view of a packed container. Immutable after open; safe to share
/// across threads.
class PackedDataset {
public:
    static PackedDataset open(const std::string& path, LoadMode mode = LoadMode::in_memory,
                              const char (&magic)[4] = kUnitMagic);

    const DatasetManifest& manifest() const { return manifest_; }
    const std::string& path() const { return path_; }
    LoadMode mode() const { return mode_; }
    std::size_t size() const { return manifest_.utterance_ids.size(); }

    bool contains(const std::string& id) const { return index_.contains(id); }
    std::size_t index_of(const std::string& id) const;

    CodecUnitSequence unpack(std::size_t index) const;
    CodecUnitSequence unpack(const std::string& id) const { return unpack(index_of(id)); }
    std::vector<NamedSequence> unpack_all() const;

private:
    std::string path_;
    LoadMode mode_ = LoadMode::in_memory;
    DatasetManifest manifest_;
    std::vector<std::uint64_t> offsets_;
    std::map<std::string, std::size_t> index_;
    std::shared_ptr<const std::vector<std::uint8_t>> payload_;
};

CodecUnitSequence unpack_sequence(const PackedDataset& dataset, const std::string& utterance_id);

struct StorageReport {
    std::uint64_t packed_bytes = 0;        ///< payload only
    std::uint64_t container_bytes = 0;     ///< payload + header
    std::uint64_t word16_bytes = 0;        ///< same codes stored as 16-bit words
    std::uint64_t pcm16_equivalent_bytes = 0;
    double duration_seconds = 0.0;
    double ratio = 0.0;                    ///< pcm16 / packed payload
    double ratio_with_header = 0.0;        ///< pcm16 / container
    double ratio_word16 = 0.0;             ///< pcm16 / 16-bit words
    double theoretical_bits_per_second = 0.0;
    double theoretical_ratio = 0.0;        ///< 256 kbit/s over theoretical_bits_per_second
};

inline constexpr int kPcmSampleRate = 16000;
inline constexpr int kPcmBytesPerSample = 2;

StorageReport storage_report(const DatasetManifest& manifest);
std::string format_storage_report(const StorageReport& report);

struct ImportSchema {
    enum class Layout { text, raw_int32 };
    Layout layout = Layout::text;
    /// Required for raw input; for text input overrides/validates the
    /// `# codebook_sizes` metadata line.
    std::vector<std::uint32_t> codebook_sizes;
    /// 0 means "take it from the file metadata".
    int frame_rate_hz = 0;
    /// Utterance id used when the file does not name one.
    std::string default_id = "utt";
};

/// Reads externally extracted units.
///
/// Text layout: one frame per line, N_cb space-separated decimal integers.
/// Lines starting with '#' carry metadata (`# codebook_sizes 1024 1024`,
/// `# frame_rate_hz 50`, `# utterance <id>`) or are comments. A
/// `# utterance` line starts a new utterance.
///
/// Raw layout: little-endian int32, frame-major, one utterance per file.
std::vector<NamedSequence> import_external_units(const std::string& path, const ImportSchema& schema);

/// Writes sequences in the text layout read by import_external_units.
void export_units_text(const std::string& path, std::span<const NamedSequence> sequences);

}  // namespace c2v
