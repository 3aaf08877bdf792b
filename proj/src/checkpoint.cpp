#include "c2v/checkpoint.hpp"

#include "c2v/binary_io.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace c2v {

namespace {

void write_params(BinaryWriter& w, const EncoderParams<float>& p) {
    const auto names = p.names();
    const auto tensors = p.tensors();
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        w.str(names[i]);
        w.matrix_f32(*tensors[i]);
    }
}

/// Reads a tensor block into a structure shaped by `config`; the number of
/// heads is taken from the file.
EncoderParams<float> read_params(BinaryReader& r, const EncoderConfig& config, const std::string& what) {
    const auto count = r.u32();
    std::map<std::string, MatF> by_name;
    std::size_t heads = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name = r.str(256);
        auto m = r.matrix_f32<float>();
        if (name.starts_with("head.")) heads = std::max<std::size_t>(heads, std::stoul(name.substr(5)) + 1);
        by_name.emplace(std::move(name), std::move(m));
    }
    EncoderConfig shape_only = config;
    shape_only.seed = 0;
    EncoderParams<float> p = init_params<float>(shape_only);
    p.heads.resize(heads);
    const auto names = p.names();
    auto tensors = p.tensors();
    if (names.size() != by_name.size()) throw FormatError(what + ": tensor count does not match the config");
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto it = by_name.find(names[i]);
        if (it == by_name.end()) throw FormatError(what + ": missing tensor '" + names[i] + "'");
        const bool is_head = names[i].starts_with("head.");
        if (!is_head && (it->second.rows() != tensors[i]->rows() || it->second.cols() != tensors[i]->cols()))
            throw FormatError(what + ": tensor '" + names[i] + "' has the wrong shape");
        if (is_head && it->second.cols() != static_cast<Eigen::Index>(config.d_model))
            throw FormatError(what + ": head '" + names[i] + "' has the wrong width");
        *tensors[i] = std::move(it->second);
    }
    return p;
}

std::string config_text(const Checkpoint& c) {
    std::ostringstream os;
    for (const auto& [k, v] : c.encoder.to_map()) os << k << '=' << v << '\n';
    for (const auto& [k, v] : c.train_config) os << "train." << k << '=' << v << '\n';
    return os.str();
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp);
        BinaryWriter w(out);
        w.bytes("C2VK", 4);
        w.u32(kCheckpointVersion);
        w.str(config_text(c));
        w.u64(c.step);
        write_params(w, c.params);

        w.u8(c.optimizer ? 1 : 0);
        if (c.optimizer) {
            w.u64(c.optimizer->steps);
            write_params(w, c.optimizer->m);
            write_params(w, c.optimizer->v);
        }

        w.u8(c.teacher ? 1 : 0);
        if (c.teacher) {
            const auto& t = *c.teacher;
            write_params(w, t.params);
            w.u8(t.initialized ? 1 : 0);
            w.u8(t.frozen ? 1 : 0);
            w.u64(t.forward_calls);
            w.u64(t.cluster.codebook_size);
            w.f64(t.cluster.codebook_decay);
            w.u64(t.cluster.dead_after);
            w.u32(static_cast<std::uint32_t>(t.cluster.layers.size()));
            for (std::size_t i = 0; i < t.cluster.layers.size(); ++i) {
                w.u32(static_cast<std::uint32_t>(t.cluster.layers[i]));
                if (t.initialized) {
                    w.matrix_f32(t.codebooks[i]);
                    for (auto idle : t.idle[i]) w.u64(idle);
                }
            }
        }
        if (!out) throw Error("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open checkpoint " + path);
    BinaryReader r(in, path);
    r.expect_magic("C2VK");
    const auto version = r.u32();
    if (version != kCheckpointVersion) throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));

    Checkpoint c;
    std::map<std::string, std::string> enc_kv;
    {
        std::istringstream text(r.str());
        std::string line;
        while (std::getline(text, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto key = line.substr(0, eq);
            auto value = line.substr(eq + 1);
            if (key.starts_with("train.")) c.train_config[key.substr(6)] = value;
            else enc_kv[key] = value;
        }
    }
    c.encoder = EncoderConfig::from_map(enc_kv);
    c.step = r.u64();
    c.params = read_params(r, c.encoder, path);

    if (r.u8()) {
        AdamState<float> opt;
        opt.steps = r.u64();
        opt.m = read_params(r, c.encoder, path);
        opt.v = read_params(r, c.encoder, path);
        if (!opt.m.same_shapes(c.params) || !opt.v.same_shapes(c.params))
            throw FormatError(path + ": optimizer state does not match the parameters");
        c.optimizer = std::move(opt);
    }

    if (r.u8()) {
        TeacherState<float> t;
        t.params = read_params(r, c.encoder, path);
        t.initialized = r.u8() != 0;
        t.frozen = r.u8() != 0;
        t.forward_calls = r.u64();
        t.cluster.codebook_size = r.u64();
        t.cluster.codebook_decay = r.f64();
        t.cluster.dead_after = r.u64();
        const auto layers = r.u32();
        for (std::uint32_t i = 0; i < layers; ++i) {
            t.cluster.layers.push_back(r.u32());
            if (t.initialized) {
                t.codebooks.push_back(r.matrix_f32<float>());
                std::vector<std::uint64_t> idle(t.cluster.codebook_size);
                for (auto& v : idle) v = r.u64();
                t.idle.push_back(std::move(idle));
            }
        }
        c.teacher = std::move(t);
    }
    return c;
}

}  // namespace c2v
