#pragma once

#include <torch/torch.h>

#include "icrdn/config.hpp"

namespace icrdn {

/// conv3x3 -> BN -> ReLU, twice, with an identity or 1x1 projection shortcut.
class BasicBlockImpl : public torch::nn::Module {
public:
    BasicBlockImpl(int in_channels, int out_channels, int stride);
    auto forward(torch::Tensor x) -> torch::Tensor;

private:
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
    torch::nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(BasicBlock);

/// Maps an image batch (N, C, H, W) to feature vectors (N, out_dim).
/// All architectures end in global average pooling and a linear layer, so
/// any input size that survives their downsampling is accepted.
auto make_backbone(Backbone kind, int in_channels, int out_dim) -> torch::nn::AnyModule;

/// Residual encoder: stride-2 stem then four stride-2 residual stages; the
/// identity prior's desk architecture.
auto make_small_resnet(int in_channels, int out_dim, int base_width = 16) -> torch::nn::AnyModule;

}  // namespace icrdn
