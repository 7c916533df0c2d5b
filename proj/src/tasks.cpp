// SPDX-License-Identifier: Apache-2.0
#include "meteora/tasks.hpp"

#include <algorithm>

namespace meteora {

const char* to_string(TaskKind kind) noexcept {
    switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::successor: return "successor";
    case TaskKind::constant_tag: return "constant-tag";
    }
    return "?";
}

TaskKind parse_task_kind(const std::string& name) {
    if (name == "copy") return TaskKind::copy;
    if (name == "reverse") return TaskKind::reverse;
    if (name == "successor") return TaskKind::successor;
    if (name == "constant-tag") return TaskKind::constant_tag;
    throw ParameterError("unknown task '" + name + "'");
}

std::vector<int> TaskSample::tokens() const {
    std::vector<int> out = prompt;
    out.insert(out.end(), target.begin(), target.end());
    return out;
}

std::vector<int> SyntheticTask::answer(const std::vector<int>& payload) const {
    std::vector<int> out;
    out.reserve(payload.size());
    switch (kind) {
    case TaskKind::copy: out = payload; break;
    case TaskKind::reverse: out.assign(payload.rbegin(), payload.rend()); break;
    case TaskKind::successor:
        for (int t : payload) out.push_back(alphabet_begin + (t - alphabet_begin + 1) % alphabet_size);
        break;
    case TaskKind::constant_tag: out.assign(payload.size(), alphabet_begin); break;
    }
    return out;
}

TaskSample SyntheticTask::generate(Rng& rng) const {
    std::vector<int> payload(length);
    for (auto& t : payload) t = alphabet_begin + static_cast<int>(rng.below(static_cast<std::uint64_t>(alphabet_size)));
    TaskSample s;
    s.prompt.insert(s.prompt.end(), payload.begin(), payload.end());
    s.prompt.push_back(separator());
    s.target = answer(payload);
    s.task_id = id;
    return s;
}

TaskSample SyntheticTask::generate(std::uint64_t seed) const {
    Rng rng(seed);
    return generate(rng);
}

TaskSuite TaskSuite::standard(std::size_t length) {
    std::vector<SyntheticTask> tasks;
    const TaskKind kinds[] = {TaskKind::copy, TaskKind::reverse, TaskKind::successor, TaskKind::constant_tag};
    for (std::size_t i = 0; i < 4; ++i) {
        SyntheticTask t;
        t.kind = kinds[i];
        t.name = to_string(kinds[i]);
        t.id = i;
        t.alphabet_size = 12;
        t.alphabet_begin = kFirstTaskToken + static_cast<int>(i) * (t.alphabet_size + 1);
        t.length = length;
        tasks.push_back(t);
    }
    return TaskSuite(std::move(tasks));
}

TaskSuite TaskSuite::first(std::size_t count, std::size_t length) {
    auto all = standard(length).tasks();
    if (count < 1 || count > all.size()) throw ParameterError("task count must be in [1, 4]");
    all.resize(count);
    return TaskSuite(std::move(all));
}

TaskSuite::TaskSuite(std::vector<SyntheticTask> tasks) : tasks_(std::move(tasks)) {
    if (tasks_.empty()) throw ConfigurationError("task suite is empty");
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
        if (tasks_[i].id != i) throw ConfigurationError("task ids must be 0..n-1 in order");
        for (std::size_t j = 0; j < i; ++j) {
            const auto& a = tasks_[i];
            const auto& b = tasks_[j];
            if (a.alphabet_begin <= b.separator() && b.alphabet_begin <= a.separator()) {
                throw ConfigurationError("tasks '" + a.name + "' and '" + b.name + "' share tokens");
            }
        }
    }
}

std::vector<std::string> TaskSuite::names() const {
    std::vector<std::string> out;
    for (const auto& t : tasks_) out.push_back(t.name);
    return out;
}

std::size_t TaskSuite::index_of(const std::string& name) const {
    for (const auto& t : tasks_)
        if (t.name == name) return t.id;
    throw ParameterError("unknown task '" + name + "'");
}

std::size_t TaskSuite::min_vocab() const {
    int hi = kFirstTaskToken;
    for (const auto& t : tasks_) hi = std::max(hi, t.separator() + 1);
    return static_cast<std::size_t>(hi);
}

std::vector<TaskSample> TaskSuite::balanced_dataset(std::size_t per_task, std::uint64_t seed) const {
    std::vector<TaskSample> out;
    out.reserve(per_task * tasks_.size());
    Rng rng(seed);
    for (std::size_t i = 0; i < per_task; ++i)
        for (const auto& t : tasks_) out.push_back(t.generate(rng));
    return out;
}

} // namespace meteora
