#pragma once

#include <cstdint>
#include <vector>

#include "clner/num/tensor.hpp"

namespace clner::num {

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Linear warmup followed by cosine decay to zero; returns a multiplier on the
// base learning rate for a 0-based update index.
double warmup_cosine(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps);

// Adam with decoupled weight decay. Parameters are registered in groups that
// share a learning rate. Parameters that received no gradient since the last
// zero_grad() are skipped, so an unused parameter is left bitwise unchanged.
class AdamW {
public:
    explicit AdamW(AdamWOptions options = {}) : options_(options) {}

    // Returns the group index.
    std::size_t add_group(std::vector<Tensor> params, double lr);
    void add_params(std::size_t group, std::vector<Tensor> params);
    void set_lr_multiplier(double m) { lr_multiplier_ = m; }

    // Throws std::logic_error when no registered parameter has a gradient.
    void step();
    void zero_grad();

    std::int64_t step_count() const { return step_count_; }
    const AdamWOptions& options() const { return options_; }
    double group_lr(std::size_t group) const { return groups_.at(group).lr; }

    struct Slot {
        Tensor param;
        std::vector<double> m;
        std::vector<double> v;
        std::int64_t updates = 0;
    };

    const std::vector<Slot>& slots(std::size_t group) const { return groups_.at(group).slots; }

private:
    struct Group {
        double lr;
        std::vector<Slot> slots;
    };

    AdamWOptions options_;
    std::vector<Group> groups_;
    std::int64_t step_count_ = 0;
    double lr_multiplier_ = 1.0;
};

}  // namespace clner::num
