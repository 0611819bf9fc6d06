#include "clner/num/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace clner::num {

double warmup_cosine(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps) {
    if (step < warmup_steps) return static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const std::int64_t decay_steps = total_steps - warmup_steps;
    if (decay_steps <= 0) return 1.0;
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps));
    return 0.5 * (1.0 + std::cos(M_PI * progress));
}

std::size_t AdamW::add_group(std::vector<Tensor> params, double lr) {
    groups_.push_back({lr, {}});
    add_params(groups_.size() - 1, std::move(params));
    return groups_.size() - 1;
}

void AdamW::add_params(std::size_t group, std::vector<Tensor> params) {
    auto& g = groups_.at(group);
    for (auto& p : params) {
        if (!p.requires_grad()) throw std::invalid_argument("AdamW: parameter does not require grad");
        const std::size_t n = p.size();
        g.slots.push_back({std::move(p), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0});
    }
}

void AdamW::step() {
    bool any = false;
    for (const auto& g : groups_) {
        for (const auto& s : g.slots) any = any || s.param.has_grad();
    }
    if (!any) throw std::logic_error("AdamW::step: no parameter has a gradient; call backward() first");
    ++step_count_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    for (auto& g : groups_) {
        const double lr = g.lr * lr_multiplier_;
        for (auto& s : g.slots) {
            if (!s.param.has_grad()) continue;
            ++s.updates;
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(s.updates));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(s.updates));
            auto w = s.param.mutable_values();
            auto grad = s.param.grad();
            const double decay = 1.0 - lr * options_.weight_decay;
            for (std::size_t i = 0; i < w.size(); ++i) {
                s.m[i] = b1 * s.m[i] + (1.0 - b1) * grad[i];
                s.v[i] = b2 * s.v[i] + (1.0 - b2) * grad[i] * grad[i];
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                w[i] = w[i] * decay - lr * mhat / (std::sqrt(vhat) + options_.eps);
            }
        }
    }
}

void AdamW::zero_grad() {
    for (auto& g : groups_) {
        for (auto& s : g.slots) s.param.clear_grad();
    }
}

}  // namespace clner::num
