#pragma once

#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

#include "ctxlab/params.hpp"
#include "ctxlab/tensor.hpp"

namespace ctxlab {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard Adam with bias correction. Only parameters that are trainable,
// present in the gradient map, and (when a filter is given) in the active id
// set are touched; everything else keeps its exact bytes.
class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

    void step(ParamStore& params, const std::map<std::string, Tensor>& grads,
              const std::set<std::string>* active_ids = nullptr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (const auto& [id, g] : grads) {
            if (!params.contains(id)) {
                continue;
            }
            Parameter& p = params.at(id);
            if (!p.trainable) {
                continue;
            }
            if (active_ids != nullptr && active_ids->count(id) == 0) {
                continue;
            }
            if (g.shape != p.tensor.shape) {
                throw std::invalid_argument("adam: gradient shape mismatch for " + id + ": " +
                                            shape_str(g.shape) + " vs " +
                                            shape_str(p.tensor.shape));
            }
            State& s = state_.try_emplace(id, State{Tensor(p.tensor.shape), Tensor(p.tensor.shape)})
                           .first->second;
            for (std::size_t i = 0; i < g.values.size(); ++i) {
                s.m.values[i] = cfg_.beta1 * s.m.values[i] + (1.0 - cfg_.beta1) * g.values[i];
                s.v.values[i] =
                    cfg_.beta2 * s.v.values[i] + (1.0 - cfg_.beta2) * g.values[i] * g.values[i];
                const double mhat = s.m.values[i] / bc1;
                const double vhat = s.v.values[i] / bc2;
                p.tensor.values[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    long step_count() const { return t_; }

  private:
    struct State {
        Tensor m;
        Tensor v;
    };
    AdamConfig cfg_;
    std::map<std::string, State> state_;
    long t_ = 0;
};

}  // namespace ctxlab
