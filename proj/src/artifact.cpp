// SPDX-License-Identifier: Apache-2.0
#include "meteora/artifact.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <map>

#include <zlib.h>

namespace meteora {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'R', 'A'};
constexpr std::size_t kHeaderBytes = 12;
constexpr std::size_t kEntryBytes = 4 + 8 + 8 + 4;
const char* const kKnownTags[] = {"CONF", "BASE", "BANK", "GATE", "META"};

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    std::vector<std::uint8_t> out;
};

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size, std::string where)
        : data_(data), size_(size), where_(std::move(where)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{data_[pos_++]} << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{data_[pos_++]} << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str() {
        const std::size_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    std::string fixed(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == size_; }

private:
    void need(std::size_t n) const {
        if (size_ - pos_ < n) throw CorruptFileError(where_ + ": truncated");
    }

    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
    std::string where_;
};

std::uint32_t crc_of(const std::vector<std::uint8_t>& payload) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t at = 0;
    while (at < payload.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(payload.size() - at, 1u << 30));
        crc = crc32(crc, payload.data() + at, chunk);
        at += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

bool known_tag(const std::string& tag) {
    for (const char* t : kKnownTags)
        if (tag == t) return true;
    return false;
}

std::string site_key(std::size_t block, std::size_t site, const char* what) {
    return "block" + std::to_string(block) + "." + site_name(kAllSites[site]) + "." + what;
}

std::vector<std::uint8_t> json_bytes(const nlohmann::ordered_json& j) {
    const std::string s = j.dump(2) + "\n";
    return {s.begin(), s.end()};
}

nlohmann::ordered_json parse_json(const ArtifactSection& s) {
    try {
        return nlohmann::ordered_json::parse(s.payload.begin(), s.payload.end());
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError("section " + s.tag + ": invalid JSON (" + e.what() + ")");
    }
}

} // namespace

const ArtifactSection* ArtifactFile::find(const std::string& tag) const {
    for (const auto& s : sections)
        if (s.tag == tag) return &s;
    return nullptr;
}

void ArtifactFile::put(ArtifactSection section) {
    for (auto& s : sections) {
        if (s.tag == section.tag) {
            s = std::move(section);
            return;
        }
    }
    sections.push_back(std::move(section));
}

std::vector<std::uint8_t> encode_artifact(const ArtifactFile& file) {
    Writer w;
    w.bytes(kMagic, 4);
    w.u32(file.version);
    w.u32(static_cast<std::uint32_t>(file.sections.size()));
    std::uint64_t offset = kHeaderBytes + kEntryBytes * file.sections.size();
    for (const auto& s : file.sections) {
        if (s.tag.size() != 4) throw ParameterError("section tag '" + s.tag + "' is not four characters");
        w.bytes(s.tag.data(), 4);
        w.u64(offset);
        w.u64(s.payload.size());
        w.u32(crc_of(s.payload));
        offset += s.payload.size();
    }
    for (const auto& s : file.sections) w.bytes(s.payload.data(), s.payload.size());
    return std::move(w.out);
}

ArtifactFile decode_artifact(const std::vector<std::uint8_t>& bytes, std::vector<std::string>* warnings) {
    Reader r(bytes.data(), bytes.size(), "artifact header");
    if (r.fixed(4) != std::string(kMagic, 4)) throw CorruptFileError("not an MTRA artifact (bad magic)");
    ArtifactFile file;
    file.version = r.u32();
    const std::uint32_t count = r.u32();
    if (file.version > kArtifactVersion && warnings) {
        warnings->push_back("artifact version " + std::to_string(file.version) + " is newer than " +
                            std::to_string(kArtifactVersion) + "; reading known sections only");
    }
    if (count > (bytes.size() - kHeaderBytes) / kEntryBytes) throw CorruptFileError("section table is truncated");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string tag = r.fixed(4);
        const std::uint64_t offset = r.u64(), length = r.u64();
        const std::uint32_t crc = r.u32();
        if (offset > bytes.size() || length > bytes.size() - offset) {
            throw CorruptFileError("section " + tag + " points outside the file");
        }
        ArtifactSection s{tag, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                                          bytes.begin() + static_cast<std::ptrdiff_t>(offset + length))};
        if (crc_of(s.payload) != crc) throw CorruptFileError("checksum mismatch in section " + tag);
        if (!known_tag(tag)) {
            if (warnings) warnings->push_back("skipping unknown section '" + tag + "'");
            continue;
        }
        file.sections.push_back(std::move(s));
    }
    return file;
}

void save_artifact(const std::filesystem::path& path, const ArtifactFile& file) {
    const auto bytes = encode_artifact(file);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

ArtifactFile load_artifact(const std::filesystem::path& path, std::vector<std::string>* warnings) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_artifact(bytes, warnings);
}

std::vector<std::uint8_t> encode_tensors(const std::vector<NamedTensor>& tensors) {
    Writer w;
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        w.str(t.name);
        w.u32(static_cast<std::uint32_t>(t.value.rank()));
        for (std::size_t d : t.value.shape()) w.u64(d);
        for (float v : t.value.data()) w.f32(v);
    }
    return std::move(w.out);
}

std::vector<NamedTensor> decode_tensors(const std::vector<std::uint8_t>& payload, const std::string& tag) {
    Reader r(payload.data(), payload.size(), "section " + tag);
    const std::uint32_t count = r.u32();
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.str();
        const std::uint32_t rank = r.u32();
        if (rank == 0 || rank > 8) throw CorruptFileError("section " + tag + ": tensor '" + t.name + "' has bad rank");
        Shape shape(rank);
        std::size_t numel = 1;
        for (auto& d : shape) {
            d = r.u64();
            if (d == 0 || d > payload.size()) throw CorruptFileError("section " + tag + ": bad dim in '" + t.name + "'");
            numel *= d;
        }
        if (numel > payload.size() / 4) throw CorruptFileError("section " + tag + ": tensor '" + t.name + "' truncated");
        std::vector<float> data(numel);
        for (auto& v : data) v = r.f32();
        t.value = Tensor(std::move(shape), std::move(data));
        out.push_back(std::move(t));
    }
    if (!r.done()) throw CorruptFileError("section " + tag + ": trailing bytes");
    return out;
}

ArtifactFile model_to_artifact(const ToyModel& model, const nlohmann::ordered_json& meta) {
    const auto& cfg = model.config;
    ArtifactFile file;
    nlohmann::ordered_json conf;
    conf["vocab"] = cfg.vocab;
    conf["d_model"] = cfg.d_model;
    conf["heads"] = cfg.heads;
    conf["blocks"] = cfg.blocks;
    conf["ffn"] = cfg.ffn;
    conf["max_seq"] = cfg.max_seq;
    if (model.has_moe()) {
        const auto& layer = model.site(0, Site::q).layer;
        conf["adapters"] = model.adapter_names();
        conf["rank"] = layer.bank.rank();
        conf["alpha"] = layer.bank.alpha();
        conf["k"] = layer.routing.k;
        conf["temperature"] = layer.routing.temperature;
    }
    file.put({"CONF", json_bytes(conf)});

    std::vector<NamedTensor> base{{"tok_emb", model.tok_emb},
                                  {"pos_emb", model.pos_emb},
                                  {"final_norm", model.final_norm},
                                  {"lm_head", model.lm_head}};
    std::vector<NamedTensor> bank, gate;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const auto& blk = model.blocks[b];
        base.push_back({"block" + std::to_string(b) + ".attn_norm", blk.attn_norm});
        base.push_back({"block" + std::to_string(b) + ".mlp_norm", blk.mlp_norm});
        for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
            const auto& site = blk.sites[s];
            base.push_back({site_key(b, s, "weight"), site.layer.base_weight});
            if (!site.routed()) continue;
            bank.push_back({site_key(b, s, "a"), site.layer.bank.a_stack()});
            bank.push_back({site_key(b, s, "b"), site.layer.bank.b_stack()});
            gate.push_back({site_key(b, s, "gate"), site.layer.gate.weight});
        }
    }
    file.put({"BASE", encode_tensors(base)});
    if (!bank.empty()) {
        file.put({"BANK", encode_tensors(bank)});
        file.put({"GATE", encode_tensors(gate)});
    }
    file.put({"META", json_bytes(meta)});
    return file;
}

ToyModel model_from_artifact(const ArtifactFile& file) {
    const auto* conf_s = file.find("CONF");
    const auto* base_s = file.find("BASE");
    if (!conf_s || !base_s) throw CorruptFileError("artifact is missing the CONF or BASE section");
    const auto conf = parse_json(*conf_s);
    ToyModel m;
    try {
        m.config.vocab = conf.at("vocab");
        m.config.d_model = conf.at("d_model");
        m.config.heads = conf.at("heads");
        m.config.blocks = conf.at("blocks");
        m.config.ffn = conf.at("ffn");
        m.config.max_seq = conf.at("max_seq");
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(std::string("section CONF: ") + e.what());
    }
    m.config.validate();

    std::map<std::string, Tensor> t;
    for (auto& nt : decode_tensors(base_s->payload, "BASE")) t[nt.name] = std::move(nt.value);
    auto take = [&](const std::string& name, const Shape& shape, const std::string& tag) {
        auto it = t.find(name);
        if (it == t.end()) throw CorruptFileError("section " + tag + ": missing tensor '" + name + "'");
        if (it->second.shape() != shape) {
            throw CorruptFileError("section " + tag + ": tensor '" + name + "' has shape " +
                                   shape_to_string(it->second.shape()) + ", expected " + shape_to_string(shape));
        }
        return std::move(it->second);
    };
    const auto& cfg = m.config;
    m.tok_emb = take("tok_emb", {cfg.vocab, cfg.d_model}, "BASE");
    m.pos_emb = take("pos_emb", {cfg.max_seq, cfg.d_model}, "BASE");
    m.final_norm = take("final_norm", {1, cfg.d_model}, "BASE");
    m.lm_head = take("lm_head", {cfg.d_model, cfg.vocab}, "BASE");
    m.blocks.resize(cfg.blocks);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        auto& blk = m.blocks[b];
        blk.attn_norm = take("block" + std::to_string(b) + ".attn_norm", {1, cfg.d_model}, "BASE");
        blk.mlp_norm = take("block" + std::to_string(b) + ".mlp_norm", {1, cfg.d_model}, "BASE");
        for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
            const Site site = kAllSites[s];
            blk.sites[s].layer.base_weight = take(site_key(b, s, "weight"), {cfg.site_in(site), cfg.site_out(site)}, "BASE");
        }
    }

    const auto* bank_s = file.find("BANK");
    if (!bank_s) return m;
    const auto* gate_s = file.find("GATE");
    if (!gate_s) throw CorruptFileError("artifact has a BANK section but no GATE section");
    t.clear();
    for (auto& nt : decode_tensors(bank_s->payload, "BANK")) t[nt.name] = std::move(nt.value);
    for (auto& nt : decode_tensors(gate_s->payload, "GATE")) t[nt.name] = std::move(nt.value);
    std::vector<std::string> names;
    std::size_t rank = 0;
    double alpha = 0.0;
    RoutingConfig routing;
    try {
        names = conf.at("adapters").get<std::vector<std::string>>();
        rank = conf.at("rank");
        alpha = conf.at("alpha");
        routing.k = conf.at("k");
        routing.temperature = conf.at("temperature");
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(std::string("section CONF: ") + e.what());
    }
    const std::size_t n = names.size();
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        for (std::size_t s = 0; s < kSitesPerBlock; ++s) {
            const Site site = kAllSites[s];
            const std::size_t in = cfg.site_in(site), out = cfg.site_out(site);
            auto& layer = m.blocks[b].sites[s].layer;
            layer.bank = LoraBank<float>(take(site_key(b, s, "a"), {n, in, rank}, "BANK"),
                                         take(site_key(b, s, "b"), {n, rank, out}, "BANK"), names, alpha);
            layer.gate.weight = take(site_key(b, s, "gate"), {in, n}, "GATE");
            layer.routing = routing;
            layer.scale = layer.bank.default_scale();
            layer.validate();
        }
    }
    return m;
}

nlohmann::ordered_json artifact_meta(const ArtifactFile& file) {
    const auto* s = file.find("META");
    return s ? parse_json(*s) : nlohmann::ordered_json::object();
}

} // namespace meteora
