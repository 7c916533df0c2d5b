// SPDX-License-Identifier: Apache-2.0
//
// Synthetic tasks for the toy model. Each task owns a disjoint contiguous
// slice of the vocabulary, separator included, so every token of a sample
// names its task. A sample is [x_0 .. x_{L-1}, SEP_t] followed by the L answer
// tokens. There is no shared BOS or separator: a token common to all tasks
// carries no routing signal.

#pragma once

#include <string>
#include <vector>

#include "meteora/rng.hpp"

namespace meteora {

inline constexpr int kPadToken = 0;
inline constexpr int kFirstTaskToken = 4;

enum class TaskKind { copy, reverse, successor, constant_tag };

const char* to_string(TaskKind kind) noexcept;
TaskKind parse_task_kind(const std::string& name);

struct TaskSample {
    std::vector<int> prompt;  // x..., SEP_t
    std::vector<int> target;  // answer tokens
    std::size_t task_id = 0;

    /// prompt followed by target.
    std::vector<int> tokens() const;
};

struct SyntheticTask {
    std::string name;
    TaskKind kind = TaskKind::copy;
    std::size_t id = 0;
    int alphabet_begin = kFirstTaskToken;
    int alphabet_size = 12;  // payload tokens; the separator follows them
    std::size_t length = 4;

    int separator() const { return alphabet_begin + alphabet_size; }
    /// True for payload tokens and the separator.
    bool owns(int token) const { return token >= alphabet_begin && token <= separator(); }
    /// The answer for a given list of payload tokens.
    std::vector<int> answer(const std::vector<int>& payload) const;
    TaskSample generate(Rng& rng) const;
    TaskSample generate(std::uint64_t seed) const;
};

class TaskSuite {
public:
    /// copy, reverse, successor, constant-tag on consecutive 13-token slices.
    static TaskSuite standard(std::size_t length = 4);
    /// The first `count` tasks of the standard suite.
    static TaskSuite first(std::size_t count, std::size_t length = 4);

    explicit TaskSuite(std::vector<SyntheticTask> tasks);

    std::size_t size() const noexcept { return tasks_.size(); }
    const SyntheticTask& operator[](std::size_t i) const { return tasks_.at(i); }
    const std::vector<SyntheticTask>& tasks() const noexcept { return tasks_; }
    std::vector<std::string> names() const;
    std::size_t index_of(const std::string& name) const;
    /// Smallest vocabulary that covers every alphabet.
    std::size_t min_vocab() const;

    /// `per_task` samples of every task, interleaved task by task (balanced).
    std::vector<TaskSample> balanced_dataset(std::size_t per_task, std::uint64_t seed) const;

private:
    std::vector<SyntheticTask> tasks_;
};

} // namespace meteora
