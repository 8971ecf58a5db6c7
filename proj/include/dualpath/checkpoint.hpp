#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dualpath/error.hpp"
#include "dualpath/guard.hpp"
#include "dualpath/tensor.hpp"

namespace dualpath {

static_assert(std::endian::native == std::endian::little, "checkpoint container assumes a little-endian host");

// Flat binary container: versioned header, key-value metadata, then named
// tensors (name, shape, raw little-endian doubles). Shared by backbone and
// guard checkpoints.
class Checkpoint {
  public:
    static constexpr char magic[4] = {'D', 'P', 'C', 'K'};
    static constexpr std::uint32_t version = 1;

    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add_tensor(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }

    const Tensor* find_tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return &t;
        }
        return nullptr;
    }

    const Tensor& require_tensor(const std::string& name) const {
        const Tensor* t = find_tensor(name);
        if (t == nullptr) throw data_error("checkpoint: missing tensor '" + name + "'");
        return *t;
    }

    const std::string& require_meta(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) throw data_error("checkpoint: missing metadata key '" + key + "'");
        return it->second;
    }

    void write(std::ostream& os) const {
        os.write(magic, 4);
        write_u32(os, version);
        write_u32(os, static_cast<std::uint32_t>(meta.size()));
        for (const auto& [k, v] : meta) {
            write_string(os, k);
            write_string(os, v);
        }
        write_u32(os, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            write_string(os, name);
            write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
            for (std::size_t d : t.shape) write_u64(os, d);
            os.write(reinterpret_cast<const char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        }
        if (!os) throw data_error("checkpoint: write failed");
    }

    static Checkpoint read(std::istream& is) {
        char m[4];
        is.read(m, 4);
        if (!is || std::memcmp(m, magic, 4) != 0) throw data_error("checkpoint: bad magic");
        const std::uint32_t ver = read_u32(is);
        if (ver != version) throw data_error("checkpoint: unsupported version " + std::to_string(ver));
        Checkpoint ck;
        const std::uint32_t n_meta = read_u32(is);
        for (std::uint32_t i = 0; i < n_meta; ++i) {
            std::string k = read_string(is);
            std::string v = read_string(is);
            ck.meta.emplace(std::move(k), std::move(v));
        }
        const std::uint32_t n_tensors = read_u32(is);
        for (std::uint32_t i = 0; i < n_tensors; ++i) {
            std::string name = read_string(is);
            const std::uint32_t ndim = read_u32(is);
            std::vector<std::size_t> shape(ndim);
            for (std::uint32_t d = 0; d < ndim; ++d) shape[d] = read_u64(is);
            Tensor t(shape);
            is.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(double)));
            if (!is) throw data_error("checkpoint: truncated tensor '" + name + "'");
            ck.add_tensor(std::move(name), std::move(t));
        }
        return ck;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw data_error("checkpoint: cannot open '" + path + "' for writing");
        write(os);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw data_error("checkpoint: cannot open '" + path + "'");
        return read(is);
    }

    std::string to_bytes() const {
        std::ostringstream os(std::ios::binary);
        write(os);
        return os.str();
    }

  private:
    static void write_u32(std::ostream& os, std::uint32_t v) {
        os.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    static void write_u64(std::ostream& os, std::uint64_t v) {
        os.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    static void write_string(std::ostream& os, const std::string& s) {
        write_u32(os, static_cast<std::uint32_t>(s.size()));
        os.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    static std::uint32_t read_u32(std::istream& is) {
        std::uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!is) throw data_error("checkpoint: truncated header");
        return v;
    }
    static std::uint64_t read_u64(std::istream& is) {
        std::uint64_t v = 0;
        is.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!is) throw data_error("checkpoint: truncated header");
        return v;
    }
    static std::string read_string(std::istream& is) {
        const std::uint32_t n = read_u32(is);
        std::string s(n, '\0');
        is.read(s.data(), n);
        if (!is) throw data_error("checkpoint: truncated string");
        return s;
    }
};

// ---------------------------------------------------------------------------
// Model <-> container mapping
// ---------------------------------------------------------------------------

inline void put_config_meta(Checkpoint& ck, const ModelConfig& cfg) {
    ck.meta["config.vocab_size"] = std::to_string(cfg.vocab_size);
    ck.meta["config.d_model"] = std::to_string(cfg.d_model);
    ck.meta["config.n_layers"] = std::to_string(cfg.n_layers);
    ck.meta["config.n_heads"] = std::to_string(cfg.n_heads);
    ck.meta["config.n_kv_heads"] = std::to_string(cfg.n_kv_heads);
    ck.meta["config.head_dim"] = std::to_string(cfg.head_dim);
    ck.meta["config.d_ff"] = std::to_string(cfg.d_ff);
    ck.meta["config.max_seq_len"] = std::to_string(cfg.max_seq_len);
    {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", cfg.norm_eps);
        ck.meta["config.norm_eps"] = buf;
    }
}

inline ModelConfig config_from_meta(const Checkpoint& ck) {
    ModelConfig cfg;
    cfg.vocab_size = std::stoull(ck.require_meta("config.vocab_size"));
    cfg.d_model = std::stoull(ck.require_meta("config.d_model"));
    cfg.n_layers = std::stoull(ck.require_meta("config.n_layers"));
    cfg.n_heads = std::stoull(ck.require_meta("config.n_heads"));
    cfg.n_kv_heads = std::stoull(ck.require_meta("config.n_kv_heads"));
    cfg.head_dim = std::stoull(ck.require_meta("config.head_dim"));
    cfg.d_ff = std::stoull(ck.require_meta("config.d_ff"));
    cfg.max_seq_len = std::stoull(ck.require_meta("config.max_seq_len"));
    cfg.norm_eps = std::stod(ck.require_meta("config.norm_eps"));
    cfg.validate();
    return cfg;
}

inline void put_backbone_tensors(Checkpoint& ck, const BackboneWeights& w) {
    ck.add_tensor("backbone.embedding", w.embedding);
    ck.add_tensor("backbone.pos", w.pos);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const std::string p = "backbone.layer." + std::to_string(l) + ".";
        ck.add_tensor(p + "w_q", w.layers[l].w_q);
        ck.add_tensor(p + "w_k", w.layers[l].w_k);
        ck.add_tensor(p + "w_v", w.layers[l].w_v);
        ck.add_tensor(p + "w_o", w.layers[l].w_o);
        ck.add_tensor(p + "w_gate", w.layers[l].w_gate);
        ck.add_tensor(p + "w_up", w.layers[l].w_up);
        ck.add_tensor(p + "w_down", w.layers[l].w_down);
        ck.add_tensor(p + "attn_gain", w.layers[l].attn_gain);
        ck.add_tensor(p + "ffn_gain", w.layers[l].ffn_gain);
    }
    ck.add_tensor("backbone.final_gain", w.final_gain);
    ck.add_tensor("backbone.lm_head", w.lm_head);
}

inline Checkpoint checkpoint_from_backbone(const BackboneWeights& w) {
    Checkpoint ck;
    ck.meta["kind"] = "backbone";
    put_config_meta(ck, w.config);
    put_backbone_tensors(ck, w);
    return ck;
}

inline BackboneWeights backbone_from_checkpoint(const Checkpoint& ck) {
    BackboneWeights w;
    w.config = config_from_meta(ck);
    w.embedding = ck.require_tensor("backbone.embedding");
    w.pos = ck.require_tensor("backbone.pos");
    w.layers.resize(w.config.n_layers);
    for (std::size_t l = 0; l < w.config.n_layers; ++l) {
        const std::string p = "backbone.layer." + std::to_string(l) + ".";
        w.layers[l].w_q = ck.require_tensor(p + "w_q");
        w.layers[l].w_k = ck.require_tensor(p + "w_k");
        w.layers[l].w_v = ck.require_tensor(p + "w_v");
        w.layers[l].w_o = ck.require_tensor(p + "w_o");
        w.layers[l].w_gate = ck.require_tensor(p + "w_gate");
        w.layers[l].w_up = ck.require_tensor(p + "w_up");
        w.layers[l].w_down = ck.require_tensor(p + "w_down");
        w.layers[l].attn_gain = ck.require_tensor(p + "attn_gain");
        w.layers[l].ffn_gain = ck.require_tensor(p + "ffn_gain");
    }
    w.final_gain = ck.require_tensor("backbone.final_gain");
    w.lm_head = ck.require_tensor("backbone.lm_head");
    return w;
}

// Guard checkpoints store adapters + head + taxonomy. The frozen backbone is
// recorded by its (config, seed) recipe by default; embed_backbone=true
// inlines the full weights instead.
inline Checkpoint checkpoint_from_guard(const DualPathModel& model, std::uint64_t backbone_seed,
                                        bool embed_backbone = false) {
    Checkpoint ck;
    ck.meta["kind"] = "guard";
    put_config_meta(ck, model.config());
    ck.meta["taxonomy.size"] = std::to_string(model.taxonomy.size());
    for (std::size_t i = 0; i < model.taxonomy.size(); ++i) {
        ck.meta["taxonomy." + std::to_string(i)] = model.taxonomy.categories[i];
    }
    if (!model.adapters.items.empty()) {
        const LoraAdapter& first = model.adapters.items.begin()->second;
        ck.meta["lora.rank"] = std::to_string(first.rank);
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", first.alpha);
        ck.meta["lora.alpha"] = buf;
        std::snprintf(buf, sizeof(buf), "%.17g", first.dropout_p);
        ck.meta["lora.dropout_p"] = buf;
    }
    if (embed_backbone) {
        put_backbone_tensors(ck, model.backbone);
    } else {
        ck.meta["backbone.seed"] = std::to_string(backbone_seed);
    }
    for (const auto& [key, ad] : model.adapters.items) {
        const std::string p = "lora." + std::to_string(key.layer) + "." + proj_name(key.proj) + ".";
        ck.add_tensor(p + "A", ad.a);
        ck.add_tensor(p + "B", ad.b);
    }
    ck.add_tensor("head.weight", model.head.weight);
    return ck;
}

inline DualPathModel guard_from_checkpoint(const Checkpoint& ck) {
    if (ck.require_meta("kind") != "guard") throw data_error("checkpoint: expected kind=guard");
    DualPathModel model;
    const ModelConfig cfg = config_from_meta(ck);
    if (ck.find_tensor("backbone.embedding") != nullptr) {
        model.backbone = backbone_from_checkpoint(ck);
    } else {
        model.backbone = init_backbone(cfg, std::stoull(ck.require_meta("backbone.seed")));
    }
    const std::size_t taxo_size = std::stoull(ck.require_meta("taxonomy.size"));
    for (std::size_t i = 0; i < taxo_size; ++i) {
        model.taxonomy.categories.push_back(ck.require_meta("taxonomy." + std::to_string(i)));
    }
    model.taxonomy.validate();
    const std::size_t rank = std::stoull(ck.require_meta("lora.rank"));
    const double alpha = std::stod(ck.require_meta("lora.alpha"));
    const double dropout_p = std::stod(ck.require_meta("lora.dropout_p"));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (Proj proj : {Proj::query, Proj::key}) {
            const std::string p = "lora." + std::to_string(l) + "." + proj_name(proj) + ".";
            LoraAdapter ad;
            ad.a = ck.require_tensor(p + "A");
            ad.b = ck.require_tensor(p + "B");
            ad.rank = rank;
            ad.alpha = alpha;
            ad.dropout_p = dropout_p;
            ad.target = {l, proj};
            model.adapters.items.emplace(AdapterKey{l, proj}, std::move(ad));
        }
    }
    validate_adapter_shapes(model.adapters, cfg);
    model.head.weight = ck.require_tensor("head.weight");
    if (model.head.weight.rows() != cfg.d_model || model.head.weight.cols() != taxo_size) {
        throw data_error("checkpoint: guard head shape does not match config/taxonomy");
    }
    return model;
}

inline std::string serialize_backbone_bytes(const BackboneWeights& w) {
    return checkpoint_from_backbone(w).to_bytes();
}

}  // namespace dualpath
