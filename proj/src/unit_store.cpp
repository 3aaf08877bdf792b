#include "c2v/unit_store.hpp"

#include "c2v/bitpack.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace c2v {

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

std::uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h = fnv1a(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// CodecUnitSequence

CodecUnitSequence::CodecUnitSequence(std::size_t frames, std::vector<std::uint32_t> codebook_sizes,
                                     int frame_rate_hz, std::vector<std::uint32_t> codes)
    : frames_(frames), codebook_sizes_(std::move(codebook_sizes)), frame_rate_hz_(frame_rate_hz),
      codes_(std::move(codes)) {
    if (frames_ == 0) throw FormatError("unit sequence must have at least one frame");
    if (codebook_sizes_.empty()) throw FormatError("unit sequence must have at least one codebook");
    if (frame_rate_hz_ <= 0) throw FormatError("frame rate must be positive");
    for (auto k : codebook_sizes_)
        if (k == 0) throw FormatError("codebook sizes must be positive");
    const std::size_t n = codebook_sizes_.size();
    if (codes_.size() != frames_ * n)
        throw ShapeError("code matrix has " + std::to_string(codes_.size()) + " entries, expected " +
                          std::to_string(frames_ * n));
    for (std::size_t t = 0; t < frames_; ++t)
        for (std::size_t i = 0; i < n; ++i)
            if (codes_[t * n + i] >= codebook_sizes_[i])
                throw RangeError("code " + std::to_string(codes_[t * n + i]) + " out of range at (t=" +
                                 std::to_string(t) + ", i=" + std::to_string(i) + "), codebook size " +
                                 std::to_string(codebook_sizes_[i]));
}

CodecUnitSequence CodecUnitSequence::slice(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > frames_) throw ShapeError("bad slice bounds");
    const std::size_t n = num_codebooks();
    std::vector<std::uint32_t> sub(codes_.begin() + static_cast<std::ptrdiff_t>(begin * n),
                                   codes_.begin() + static_cast<std::ptrdiff_t>(end * n));
    return CodecUnitSequence(end - begin, codebook_sizes_, frame_rate_hz_, std::move(sub));
}

// ---------------------------------------------------------------------------
// Manifest

std::uint64_t DatasetManifest::bits_per_frame() const {
    std::uint64_t bits = 0;
    for (auto k : codebook_sizes) bits += bits_for_vocab(k);
    return bits;
}

std::uint64_t DatasetManifest::utterance_bytes(std::size_t index) const {
    return (frame_counts.at(index) * bits_per_frame() + 7) / 8;
}

std::uint64_t DatasetManifest::total_frames() const {
    std::uint64_t total = 0;
    for (auto f : frame_counts) total += f;
    return total;
}

std::string DatasetManifest::to_text() const {
    std::ostringstream os;
    os << "format_version=" << format_version << '\n';
    os << "n_cb=" << num_codebooks << '\n';
    os << "frame_rate_hz=" << frame_rate_hz << '\n';
    os << "codebook_sizes=";
    for (std::size_t i = 0; i < codebook_sizes.size(); ++i) os << (i ? "," : "") << codebook_sizes[i];
    os << '\n';
    os << "payload_bytes=" << payload_bytes << '\n';
    for (const auto& [k, v] : extra) os << "meta." << k << '=' << v << '\n';
    os << "utterances=" << utterance_ids.size() << '\n';
    for (std::size_t u = 0; u < utterance_ids.size(); ++u)
        os << "utt=" << utterance_ids[u] << ' ' << frame_counts[u] << '\n';
    return os.str();
}

namespace {

std::uint64_t parse_u64(const std::string& s, const std::string& key) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != s.size()) throw FormatError("");
        return v;
    } catch (const std::exception&) {
        throw FormatError("bad integer for manifest key '" + key + "': '" + s + "'");
    }
}

void check_id(const std::string& id) {
    if (id.empty()) throw FormatError("utterance id must not be empty");
    for (char c : id)
        if (c == ' ' || c == '\n' || c == '\r' || c == '\t' || c == '=')
            throw FormatError("utterance id '" + id + "' contains whitespace or '='");
}

}  // namespace

DatasetManifest DatasetManifest::from_text(const std::string& text) {
    DatasetManifest m;
    std::istringstream in(text);
    std::string line;
    std::uint64_t declared_utts = 0;
    bool saw_count = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("manifest line without '=': " + line);
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "format_version") {
            m.format_version = static_cast<int>(parse_u64(value, key));
        } else if (key == "n_cb") {
            m.num_codebooks = parse_u64(value, key);
        } else if (key == "frame_rate_hz") {
            m.frame_rate_hz = static_cast<int>(parse_u64(value, key));
        } else if (key == "codebook_sizes") {
            std::istringstream parts(value);
            std::string part;
            while (std::getline(parts, part, ','))
                m.codebook_sizes.push_back(static_cast<std::uint32_t>(parse_u64(part, key)));
        } else if (key == "payload_bytes") {
            m.payload_bytes = parse_u64(value, key);
        } else if (key == "utterances") {
            declared_utts = parse_u64(value, key);
            saw_count = true;
        } else if (key == "utt") {
            const auto sp = value.rfind(' ');
            if (sp == std::string::npos) throw FormatError("bad utterance line: " + line);
            m.utterance_ids.push_back(value.substr(0, sp));
            m.frame_counts.push_back(parse_u64(value.substr(sp + 1), key));
        } else if (key.starts_with("meta.")) {
            m.extra[key.substr(5)] = value;
        } else {
            throw FormatError("unknown manifest key '" + key + "'");
        }
    }
    if (!saw_count || declared_utts != m.utterance_ids.size())
        throw FormatError("manifest utterance count does not match its entries");
    if (m.num_codebooks == 0 || m.codebook_sizes.size() != m.num_codebooks)
        throw FormatError("manifest codebook metadata inconsistent");
    return m;
}

// ---------------------------------------------------------------------------
// Container writing

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void pack_one(const CodecUnitSequence& s, std::vector<std::uint8_t>& out) {
    std::vector<unsigned> bits;
    for (auto k : s.codebook_sizes()) bits.push_back(bits_for_vocab(k));
    BitWriter w(out);
    for (std::size_t t = 0; t < s.frames(); ++t)
        for (std::size_t i = 0; i < s.num_codebooks(); ++i) w.put(s.code(t, i), bits[i]);
    w.align();
}

}  // namespace

DatasetManifest write_container(const std::string& path, const char (&magic)[4],
                                std::span<const NamedSequence> sequences,
                                const std::map<std::string, std::string>& extra) {
    if (sequences.empty()) throw ConfigError("cannot pack an empty corpus");
    const auto& first = sequences.front().units;
    DatasetManifest m;
    m.num_codebooks = first.num_codebooks();
    m.frame_rate_hz = first.frame_rate_hz();
    m.codebook_sizes = first.codebook_sizes();
    m.extra = extra;

    std::map<std::string, int> seen;
    std::vector<std::uint8_t> payload;
    for (const auto& seq : sequences) {
        check_id(seq.id);
        if (seen[seq.id]++) throw FormatError("duplicate utterance id '" + seq.id + "'");
        if (!seq.units.same_layout(first))
            throw FormatError("utterance '" + seq.id +
                              "' has codebook sizes or frame rate different from the rest of the corpus");
        const std::size_t before = payload.size();
        pack_one(seq.units, payload);
        m.utterance_ids.push_back(seq.id);
        m.frame_counts.push_back(seq.units.frames());
        if (payload.size() - before != m.utterance_bytes(m.utterance_ids.size() - 1))
            throw Error("internal: packed size mismatch");
    }
    m.payload_bytes = payload.size();

    const std::string text = m.to_text();
    std::string head(magic, 4);
    head.push_back(static_cast<char>(kContainerVersion));
    put_u32(head, static_cast<std::uint32_t>(text.size()));
    head += text;
    m.header_bytes = head.size();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) throw Error("write failed for " + path);
    return m;
}

DatasetManifest pack_dataset(std::span<const NamedSequence> sequences, const std::string& out_path) {
    return write_container(out_path, kUnitMagic, sequences);
}

// ---------------------------------------------------------------------------
// Container reading

PackedDataset PackedDataset::open(const std::string& path, LoadMode mode, const char (&magic)[4]) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path);
    unsigned char pre[9];
    in.read(reinterpret_cast<char*>(pre), 9);
    if (in.gcount() != 9) throw FormatError(path + ": truncated header");
    if (std::memcmp(pre, magic, 4) != 0)
        throw FormatError(path + ": bad magic, expected '" + std::string(magic, 4) + "'");
    if (pre[4] != kContainerVersion)
        throw FormatError(path + ": unsupported container version " + std::to_string(pre[4]));
    const std::uint32_t text_len = get_u32(pre + 5);
    const auto file_size = std::filesystem::file_size(path);
    if (9ull + text_len > file_size) throw FormatError(path + ": header length exceeds file size");
    std::string text(text_len, '\0');
    in.read(text.data(), text_len);

    PackedDataset ds;
    ds.path_ = path;
    ds.mode_ = mode;
    ds.manifest_ = DatasetManifest::from_text(text);
    ds.manifest_.header_bytes = 9ull + text_len;
    if (ds.manifest_.format_version != kContainerVersion)
        throw FormatError(path + ": manifest version mismatch");

    std::uint64_t offset = 0;
    for (std::size_t u = 0; u < ds.manifest_.utterance_ids.size(); ++u) {
        ds.offsets_.push_back(offset);
        offset += ds.manifest_.utterance_bytes(u);
        if (!ds.index_.emplace(ds.manifest_.utterance_ids[u], u).second)
            throw FormatError(path + ": duplicate utterance id");
    }
    if (offset != ds.manifest_.payload_bytes || ds.manifest_.total_bytes() != file_size)
        throw FormatError(path + ": payload size does not match manifest");

    if (mode == LoadMode::in_memory) {
        auto buf = std::make_shared<std::vector<std::uint8_t>>(ds.manifest_.payload_bytes);
        in.read(reinterpret_cast<char*>(buf->data()), static_cast<std::streamsize>(buf->size()));
        if (static_cast<std::uint64_t>(in.gcount()) != buf->size()) throw FormatError(path + ": truncated payload");
        ds.payload_ = std::move(buf);
    }
    return ds;
}

std::size_t PackedDataset::index_of(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw NotFoundError("utterance '" + id + "' not found in " + path_);
    return it->second;
}

CodecUnitSequence PackedDataset::unpack(std::size_t index) const {
    if (index >= size()) throw NotFoundError("utterance index out of range");
    const auto bytes = manifest_.utterance_bytes(index);
    std::vector<std::uint8_t> local;
    std::span<const std::uint8_t> view;
    if (payload_) {
        view = std::span<const std::uint8_t>(*payload_).subspan(offsets_[index], bytes);
    } else {
        std::ifstream in(path_, std::ios::binary);
        if (!in) throw NotFoundError("cannot open " + path_);
        in.seekg(static_cast<std::streamoff>(manifest_.header_bytes + offsets_[index]));
        local.resize(bytes);
        in.read(reinterpret_cast<char*>(local.data()), static_cast<std::streamsize>(bytes));
        if (static_cast<std::uint64_t>(in.gcount()) != bytes) throw FormatError(path_ + ": truncated payload");
        view = local;
    }

    const std::size_t frames = manifest_.frame_counts[index];
    const std::size_t n = manifest_.num_codebooks;
    std::vector<unsigned> bits;
    for (auto k : manifest_.codebook_sizes) bits.push_back(bits_for_vocab(k));
    std::vector<std::uint32_t> codes(frames * n);
    BitReader r(view);
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t i = 0; i < n; ++i) codes[t * n + i] = r.get(bits[i]);
    try {
        return CodecUnitSequence(frames, manifest_.codebook_sizes, manifest_.frame_rate_hz, std::move(codes));
    } catch (const RangeError& e) {
        throw FormatError(path_ + ": corrupted payload for '" + manifest_.utterance_ids[index] + "': " + e.what());
    }
}

std::vector<NamedSequence> PackedDataset::unpack_all() const {
    std::vector<NamedSequence> out;
    out.reserve(size());
    for (std::size_t u = 0; u < size(); ++u) out.push_back({manifest_.utterance_ids[u], unpack(u)});
    return out;
}

CodecUnitSequence unpack_sequence(const PackedDataset& dataset, const std::string& utterance_id) {
    return dataset.unpack(utterance_id);
}

// ---------------------------------------------------------------------------
// Storage accounting

StorageReport storage_report(const DatasetManifest& manifest) {
    StorageReport r;
    const auto frames = manifest.total_frames();
    r.packed_bytes = manifest.payload_bytes;
    r.container_bytes = manifest.total_bytes();
    r.word16_bytes = frames * manifest.num_codebooks * 2;
    r.duration_seconds = static_cast<double>(frames) / manifest.frame_rate_hz;
    r.pcm16_equivalent_bytes = frames * kPcmSampleRate * kPcmBytesPerSample / manifest.frame_rate_hz;
    const auto pcm = static_cast<double>(r.pcm16_equivalent_bytes);
    r.ratio = pcm / static_cast<double>(r.packed_bytes);
    r.ratio_with_header = pcm / static_cast<double>(r.container_bytes);
    r.ratio_word16 = pcm / static_cast<double>(r.word16_bytes);
    r.theoretical_bits_per_second = static_cast<double>(manifest.bits_per_frame()) * manifest.frame_rate_hz;
    r.theoretical_ratio = kPcmSampleRate * kPcmBytesPerSample * 8.0 / r.theoretical_bits_per_second;
    return r;
}

std::string format_storage_report(const StorageReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "duration_seconds        " << r.duration_seconds << '\n';
    os << "pcm16_16khz_bytes       " << r.pcm16_equivalent_bytes << '\n';
    os << "packed_payload_bytes    " << r.packed_bytes << "  (ratio " << r.ratio << "x)\n";
    os << "packed_container_bytes  " << r.container_bytes << "  (ratio " << r.ratio_with_header << "x)\n";
    os << "word16_bytes            " << r.word16_bytes << "  (ratio " << r.ratio_word16 << "x)\n";
    os << "theoretical_bitrate     " << r.theoretical_bits_per_second << " bit/s  (ratio "
       << r.theoretical_ratio << "x vs 256000 bit/s PCM)\n";
    os << "reference               960 h LibriSpeech, wav vs npz units: 60.4 GB -> 3.6 GB (16.5x)\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Import / export

namespace {

std::vector<std::uint32_t> parse_row(const std::string& line, std::size_t lineno) {
    std::istringstream is(line);
    std::vector<std::uint32_t> row;
    std::string tok;
    while (is >> tok) {
        std::size_t used = 0;
        long long v = 0;
        try {
            v = std::stoll(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size() || tok.empty()) throw FormatError("line " + std::to_string(lineno) + ": bad integer '" + tok + "'");
        if (v < 0) throw RangeError("line " + std::to_string(lineno) + ": negative code " + tok);
        if (v > 0xffffffffLL) throw RangeError("line " + std::to_string(lineno) + ": code too large " + tok);
        row.push_back(static_cast<std::uint32_t>(v));
    }
    return row;
}

struct PendingUtterance {
    std::string id;
    std::vector<std::uint32_t> codes;
    std::size_t frames = 0;
};

NamedSequence finish(PendingUtterance& p, const std::vector<std::uint32_t>& sizes, int rate) {
    try {
        return {p.id, CodecUnitSequence(p.frames, sizes, rate, std::move(p.codes))};
    } catch (const RangeError& e) {
        throw RangeError("utterance '" + p.id + "': " + e.what());
    }
}

}  // namespace

std::vector<NamedSequence> import_external_units(const std::string& path, const ImportSchema& schema) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path);

    if (schema.layout == ImportSchema::Layout::raw_int32) {
        if (schema.codebook_sizes.empty() || schema.frame_rate_hz <= 0)
            throw ConfigError("raw import needs codebook sizes and frame rate");
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const std::size_t n = schema.codebook_sizes.size();
        if (bytes.size() % (4 * n) != 0 || bytes.empty())
            throw FormatError(path + ": raw size " + std::to_string(bytes.size()) + " is not a multiple of " +
                              std::to_string(4 * n) + " bytes per frame");
        std::vector<std::uint32_t> codes(bytes.size() / 4);
        for (std::size_t k = 0; k < codes.size(); ++k) {
            const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + 4 * k);
            const auto v = static_cast<std::int32_t>(get_u32(p));
            if (v < 0)
                throw RangeError("negative code at (t=" + std::to_string(k / n) + ", i=" + std::to_string(k % n) + ")");
            codes[k] = static_cast<std::uint32_t>(v);
        }
        PendingUtterance p{schema.default_id, std::move(codes), bytes.size() / (4 * n)};
        return {finish(p, schema.codebook_sizes, schema.frame_rate_hz)};
    }

    std::vector<std::uint32_t> sizes = schema.codebook_sizes;
    std::vector<std::uint32_t> file_sizes;
    int rate = 0;
    std::vector<PendingUtterance> pending;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        if (line[0] == '#') {
            std::istringstream is(line.substr(1));
            std::string key;
            is >> key;
            if (key == "codebook_sizes") {
                file_sizes.clear();
                std::uint32_t k;
                while (is >> k) file_sizes.push_back(k);
            } else if (key == "frame_rate_hz") {
                is >> rate;
            } else if (key == "utterance") {
                std::string id;
                is >> id;
                pending.push_back({id, {}, 0});
            }
            continue;
        }
        if (pending.empty()) pending.push_back({schema.default_id, {}, 0});
        auto row = parse_row(line, lineno);
        const std::size_t expected = !sizes.empty() ? sizes.size() : !file_sizes.empty() ? file_sizes.size() : 0;
        auto& cur = pending.back();
        const std::size_t width = expected ? expected : (cur.frames ? cur.codes.size() / cur.frames : row.size());
        if (row.size() != width)
            throw FormatError(path + ": ragged row at line " + std::to_string(lineno) + " (" +
                              std::to_string(row.size()) + " codes, expected " + std::to_string(width) + ")");
        cur.codes.insert(cur.codes.end(), row.begin(), row.end());
        ++cur.frames;
    }

    if (sizes.empty()) sizes = file_sizes;
    else if (!file_sizes.empty() && file_sizes != sizes)
        throw FormatError(path + ": codebook sizes in file disagree with the import schema");
    if (sizes.empty()) throw ConfigError(path + ": codebook sizes not given in file or schema");
    if (schema.frame_rate_hz > 0) {
        if (rate > 0 && rate != schema.frame_rate_hz)
            throw FormatError(path + ": frame rate in file disagrees with the import schema");
        rate = schema.frame_rate_hz;
    }
    if (rate <= 0) throw ConfigError(path + ": frame rate not given in file or schema");

    std::vector<NamedSequence> out;
    for (auto& p : pending) {
        if (p.frames == 0) throw FormatError(path + ": utterance '" + p.id + "' has no frames");
        if (p.codes.size() != p.frames * sizes.size())
            throw FormatError(path + ": utterance '" + p.id + "' rows do not match codebook count");
        out.push_back(finish(p, sizes, rate));
    }
    if (out.empty()) throw FormatError(path + ": no frames");
    return out;
}

void export_units_text(const std::string& path, std::span<const NamedSequence> sequences) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    if (sequences.empty()) return;
    const auto& first = sequences.front().units;
    out << "# codebook_sizes";
    for (auto k : first.codebook_sizes()) out << ' ' << k;
    out << "\n# frame_rate_hz " << first.frame_rate_hz() << '\n';
    for (const auto& s : sequences) {
        if (!s.units.same_layout(first)) throw FormatError("utterance '" + s.id + "' has a different layout");
        out << "# utterance " << s.id << '\n';
        for (std::size_t t = 0; t < s.units.frames(); ++t) {
            const auto row = s.units.frame(t);
            for (std::size_t i = 0; i < row.size(); ++i) out << (i ? " " : "") << row[i];
            out << '\n';
        }
    }
}

}  // namespace c2v
