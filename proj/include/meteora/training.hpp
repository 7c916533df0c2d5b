// SPDX-License-Identifier: Apache-2.0
//
// Differentiable (f64) forward of the toy model on the autodiff tape, the gate
// losses, gate training and a finite-difference gradient check.
//
// Gate training keeps base weights and banks frozen. Each sample contributes
//
//   topk:  CE_lm(answer positions) + beta * sum_sites mean_t CE(gate_logits_t, y)
//   top1:  sum_sites mean_t CE(gate_logits_t, y)
//
// where y is the sample's task id, applied at every position.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "meteora/tape.hpp"
#include "meteora/toy_model.hpp"

namespace meteora {

// ---- scalar losses ----

/// -log softmax(logits)[label] over all n logits.
double gate_ce_loss(std::span<const double> logits, std::size_t label);
/// lm_loss + beta * sum(gate_losses). Throws ParameterError when gate_losses is empty.
double joint_loss(double lm_loss, std::span<const double> gate_losses, double beta);
/// sum(gate_losses). Throws ParameterError when gate_losses is empty.
double top1_loss(std::span<const double> gate_losses);

// ---- f64 mirror of a ToyModel for the tape ----

struct TapeSite {
    Tensor64 weight;            // d_in x d_out
    Tensor64 lora_a, lora_b;    // single adapter, empty when absent
    double lora_scale = 0.0;
    Tensor64 a_stack, b_stack;  // frozen bank, empty when absent
    double bank_scale = 0.0;
    Tensor64 gate;              // d_in x n, empty when absent
};

struct TapeBlock {
    Tensor64 attn_norm, mlp_norm;
    std::array<TapeSite, kSitesPerBlock> sites;
};

struct TapeModel {
    ToyModelConfig config;
    Tensor64 tok_emb, pos_emb, final_norm, lm_head;
    std::vector<TapeBlock> blocks;

    /// Widen a ToyModel (base, banks and gates) to f64.
    static TapeModel from(const ToyModel& model);
    TapeSite& site(std::size_t block, Site s) { return blocks.at(block).sites[static_cast<std::size_t>(s)]; }
    const TapeSite& site(std::size_t block, Site s) const {
        return blocks.at(block).sites[static_cast<std::size_t>(s)];
    }
};

/// Which tensors enter the tape as trainable leaves.
struct TapeParams {
    bool base = false;      // site weights
    bool adapters = false;  // single-adapter A and B
    bool gates = false;
};

struct TapeForward {
    autodiff::Var logits;                     // T x vocab
    std::vector<autodiff::Var> gate_logits;   // per routed site, T x n
    std::vector<std::size_t> gate_sites;      // block*7 + site of each entry above
    std::vector<autodiff::Var> site_weights;  // per site (block*7 + site)
    std::vector<autodiff::Var> lora_a, lora_b;  // per site, when adapters present
    std::vector<autodiff::Var> gates;           // per routed site leaf
    std::vector<std::vector<std::vector<std::uint32_t>>> selections;  // [routed site][token] -> indices
};

/// Record the full forward. Routed sites use top-k on the current gate logits
/// with softmax over the selected logits at `temperature`.
TapeForward record_forward(autodiff::Tape& tape, const TapeModel& model, std::span<const int> tokens,
                           const TapeParams& params, std::size_t k, double temperature = 1.0);


// ---- gate training ----

enum class GateLoss { top1, topk };

const char* to_string(GateLoss mode) noexcept;

/// A token sequence with next-token targets and a task label per position.
/// Several task samples may be packed into one sequence; each position keeps
/// the label of the sample it came from.
struct GateSample {
    std::vector<int> tokens;
    std::vector<int> lm_targets;  // per position, -1 where ignored
    std::vector<int> labels;      // per position task id

    static GateSample from(const TaskSample& s);
    static GateSample pack(std::span<const TaskSample> samples);
};

/// Balanced dataset (`per_task` samples of each task) shuffled and packed into
/// sequences of 1..max_pack samples.
std::vector<GateSample> packed_dataset(const TaskSuite& suite, std::size_t per_task, std::size_t max_pack,
                                       std::uint64_t seed);

struct TrainConfig {
    double beta = 0.1;
    double lr = 5e-2;
    std::size_t epochs = 50;
    std::size_t batch = 8;
    GateLoss loss = GateLoss::top1;
    std::size_t k = 1;  // used by topk; top1 forces k = 1
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    /// Throws ParameterError on beta < 0, lr <= 0, batch == 0 or k == 0.
    void validate() const;
    std::size_t effective_k() const { return loss == GateLoss::top1 ? 1 : k; }
};

struct EpochLoss {
    std::size_t epoch = 0;
    double lm_loss = 0.0;    // mean over samples
    double gate_loss = 0.0;  // mean over samples of the summed site CE
    double total = 0.0;      // mean over samples of the optimized loss
};

struct GateTrainResult {
    std::vector<EpochLoss> curve;
};

/// Per-sample loss terms: LM CE and the per-site gate CE (mean over positions).
struct SampleLoss {
    autodiff::Var total;
    double lm = 0.0;
    std::vector<double> gate_terms;
};

SampleLoss sample_loss(autodiff::Tape& tape, const TapeModel& model, const GateSample& sample, const TrainConfig& cfg,
                       TapeForward* out = nullptr);

/// SGD on the gate weights of `model`; everything else is left untouched.
GateTrainResult train_gates(ToyModel& model, const std::vector<GateSample>& dataset, const TrainConfig& cfg);

/// CSV with header epoch,lm_loss,gate_loss,total.
std::string loss_curve_csv(const std::vector<EpochLoss>& curve);

/// Token-level routing accuracy: fraction of positions whose dominant adapter
/// under top-1 routing is the position's label.
double routing_accuracy(const ToyModel& model, const std::vector<GateSample>& samples);
/// Fraction of (position, site) pairs whose top-1 choice is the position's label.
double site_routing_accuracy(const ToyModel& model, const std::vector<GateSample>& samples);

// ---- gradient checking ----

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // coordinates whose perturbation flips a top-k selection
};

/// Gradients smaller than this are compared absolutely: at eps = 1e-3 the
/// central difference itself carries ~1e-8 truncation error.
inline constexpr double kGradCheckFloor = 1e-4;

/// Compare tape gradients with central differences on a random subset of gate
/// coordinates. Relative error is |g - fd| / max(|g|, |fd|, kGradCheckFloor).
GradCheckResult grad_check(const ToyModel& model, const GateSample& sample, const TrainConfig& cfg, double eps = 1e-3,
                           std::size_t coordinates = 64, std::uint64_t seed = 0);

/// Finite-difference check of an arbitrary f(x) with its analytic gradient.
GradCheckResult grad_check_function(const std::function<double(std::span<const double>)>& f,
                                    std::span<const double> x, std::span<const double> grad, double eps = 1e-3);

} // namespace meteora
