#pragma once

#include <torch/torch.h>

namespace icrdn {

/// Puts a module in evaluation mode for the lifetime of the guard.
class EvalGuard {
public:
    explicit EvalGuard(torch::nn::Module& module) : module_(module), was_training_(module.is_training()) {
        module_.eval();
    }
    ~EvalGuard() { module_.train(was_training_); }
    EvalGuard(const EvalGuard&) = delete;
    auto operator=(const EvalGuard&) -> EvalGuard& = delete;

private:
    torch::nn::Module& module_;
    bool was_training_;
};

}  // namespace icrdn
