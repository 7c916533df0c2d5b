// SPDX-License-Identifier: Apache-2.0
//
// A small pre-norm decoder-only transformer with a MeteoRA module at each of
// the seven projection sites of every block:
//
//   h  = x + o( attn( q(n1), k(n1), v(n1) ) )      n1 = rmsnorm(x)
//   y  = h + down( silu(gate(n2)) * up(n2) )       n2 = rmsnorm(h)
//
// Base weights are frozen random matrices. Inference runs in f32 through the
// moe_forward strategies.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meteora/lora_bank.hpp"
#include "meteora/moe_forward.hpp"
#include "meteora/tasks.hpp"

namespace meteora {

enum class Site : std::uint8_t { q, k, v, o, up, gate, down };

inline constexpr std::size_t kSitesPerBlock = 7;
inline constexpr std::array<Site, kSitesPerBlock> kAllSites{Site::q,  Site::k,    Site::v,   Site::o,
                                                            Site::up, Site::gate, Site::down};

const char* site_name(Site site) noexcept;
Site parse_site(const std::string& name);

struct ToyModelConfig {
    std::size_t vocab = 64;
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t blocks = 2;
    std::size_t ffn = 128;
    std::size_t max_seq = 128;

    /// Throws ConfigurationError on zero sizes or d_model not divisible by heads.
    void validate() const;
    std::size_t site_in(Site site) const;
    std::size_t site_out(Site site) const;
    std::size_t num_sites() const { return blocks * kSitesPerBlock; }

    bool operator==(const ToyModelConfig&) const = default;
};

/// One projection site. Without a bank it is a plain linear map.
struct ToySite {
    MeteoraLayer<float> layer;

    bool routed() const { return layer.bank.size() > 0; }
};

struct ToyBlock {
    Tensor attn_norm;  // 1 x d
    Tensor mlp_norm;   // 1 x d
    std::array<ToySite, kSitesPerBlock> sites;
};

struct ToyModel {
    ToyModelConfig config;
    Tensor tok_emb;     // vocab x d
    Tensor pos_emb;     // max_seq x d
    Tensor final_norm;  // 1 x d
    Tensor lm_head;     // d x vocab
    std::vector<ToyBlock> blocks;

    const ToySite& site(std::size_t block, Site s) const { return blocks.at(block).sites[static_cast<std::size_t>(s)]; }
    ToySite& site(std::size_t block, Site s) { return blocks.at(block).sites[static_cast<std::size_t>(s)]; }
    bool has_moe() const;
    /// Number of gating networks (B * 7 once banks are attached, else 0).
    std::size_t num_gates() const;
    std::size_t num_adapters() const;
    std::vector<std::string> adapter_names() const;
};

/// One trained adapter per site, indexed [block][site].
using AdapterSet = std::vector<std::array<LoraAdapter<float>, kSitesPerBlock>>;
/// One bank per site, indexed [block][site].
using SiteBanks = std::vector<std::array<LoraBank<float>, kSitesPerBlock>>;

/// Inclusive token range whose embeddings share one random centroid.
struct TokenGroup {
    int first = 0;
    int last = 0;
};

/// One group per task: its payload alphabet plus separator.
std::vector<TokenGroup> task_token_groups(const TaskSuite& suite);

inline constexpr double kDefaultGroupScale = 1.25;

/// Random frozen base model. Token embeddings are N(0, 1); tokens of a group
/// additionally share a centroid N(0, group_scale^2), which keeps each task
/// linearly readable from any hidden state.
ToyModel build_base_model(const ToyModelConfig& cfg, std::uint64_t seed, std::span<const TokenGroup> groups = {},
                          double group_scale = kDefaultGroupScale);

/// Stack per-task adapter sets into one bank per site.
SiteBanks stack_adapter_sets(const std::vector<AdapterSet>& sets);

/// Install banks and fresh gates (N(0, gate_std)) on every site.
void attach_banks(ToyModel& model, SiteBanks banks, const RoutingConfig& routing, std::uint64_t gate_seed,
                  double gate_std = 0.02);

/// build_base_model followed by attach_banks with the same seed.
ToyModel build_toy_model(const ToyModelConfig& cfg, SiteBanks banks, const RoutingConfig& routing,
                         std::uint64_t seed, std::span<const TokenGroup> groups = {});

struct InferenceOptions {
    Strategy strategy = Strategy::loop;
    ForwardOptions forward;
    /// Overrides every site's routing config (k, temperature).
    std::optional<RoutingConfig> routing;
};

struct ModelOutput {
    Tensor logits;                                     // T x vocab
    std::vector<std::vector<RoutingDecision>> routing;  // [block*7 + site][token]; empty for base sites
};

/// Full-sequence causal forward.
ModelOutput toy_forward(const ToyModel& model, std::span<const int> tokens, const InferenceOptions& opts = {});

struct TraceSite {
    std::size_t block = 0;
    Site site = Site::q;
    std::vector<std::uint32_t> indices;
    std::vector<double> weights;
};

struct TraceStep {
    std::size_t step = 0;  // position in the sequence
    int token = 0;
    std::vector<TraceSite> sites;
    std::size_t dominant = 0;
};

struct RoutingTrace {
    std::vector<std::string> adapter_names;
    std::vector<TraceStep> steps;

    /// One JSON object per line: {step, token, per_site, dominant}.
    std::string to_jsonl() const;
};

/// Adapter with the greatest summed weight over the sites; ties go to the lowest id.
std::size_t dominant_adapter(const std::vector<TraceSite>& sites, std::size_t num_adapters);

/// Routing trace of a fixed token sequence.
RoutingTrace trace_sequence(const ToyModel& model, std::span<const int> tokens, const InferenceOptions& opts = {});

struct Generation {
    std::vector<int> tokens;  // generated tokens only
    RoutingTrace trace;       // prompt and generated positions
};

/// Greedy decoding. Throws GenerationError when prompt + max_tokens exceeds max_seq.
Generation generate(const ToyModel& model, std::span<const int> prompt, std::size_t max_tokens,
                    const InferenceOptions& opts = {});

/// Extend `tokens` by `count` greedy tokens in place.
void extend_greedy(const ToyModel& model, std::vector<int>& tokens, std::size_t count, const InferenceOptions& opts);

struct SegmentReport {
    std::size_t task_id = 0;
    std::size_t begin = 0;  // first position (question start)
    std::size_t end = 0;    // one past the last generated token
    double dominance = 0.0;
    /// Positions from `begin` to the first token whose dominant adapter is the
    /// segment's task; equals the segment length when that never happens.
    std::size_t switch_offset = 0;
    std::size_t correct_answers = 0;  // generated tokens matching the reference answer
};

struct SwitchReport {
    std::vector<int> sequence;
    std::vector<SegmentReport> segments;
    RoutingTrace trace;

    double min_dominance() const;
    /// Largest switch offset over segments that follow a different task.
    std::size_t max_boundary_offset() const;
};

struct CompositeOptions {
    std::size_t shots = 2;
    std::uint64_t seed = 0;
    InferenceOptions inference;
};

/// Two worked composite examples, then each task's question answered greedily.
SwitchReport composite_eval(const ToyModel& model, const TaskSuite& suite, const std::vector<std::size_t>& tasks,
                            const CompositeOptions& opts);

// ---- adapter training ----

struct AdapterTrainConfig {
    std::size_t rank = 8;
    double alpha = 16.0;
    std::size_t steps = 400;
    std::size_t batch = 8;
    double lr = 5e-3;
    std::size_t holdout = 64;
    /// Training sequences pack 1..max_pack samples so every position is seen.
    std::size_t max_pack = 6;
    std::size_t threads = 1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AdapterTrainResult {
    AdapterSet adapters;
    double initial_loss = 0.0;  // held-out CE before training
    double final_loss = 0.0;    // held-out CE after training
};

/// LoRA fine-tune of one adapter per site on a single task. Base is read only.
AdapterTrainResult train_adapter(const ToyModel& base, const SyntheticTask& task, const AdapterTrainConfig& cfg);

/// Directly fit the base site weights on one task (learnability reference).
ToyModel train_full_model(const ToyModel& base, const SyntheticTask& task, const AdapterTrainConfig& cfg);

/// Held-out next-token CE on answer positions. With `adapters`, the base is
/// augmented by that single adapter set.
double task_loss(const ToyModel& model, const std::vector<TaskSample>& samples, const AdapterSet* adapters = nullptr);

/// Fraction of samples whose greedy answer equals the reference exactly.
double exact_match(const ToyModel& model, const std::vector<TaskSample>& samples, const InferenceOptions& opts = {});

/// Base model carrying a single adapter set as an n=1 bank on every site.
ToyModel with_single_adapter(const ToyModel& base, const AdapterSet& adapters);

} // namespace meteora
