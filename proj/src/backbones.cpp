#include "icrdn/backbones.hpp"

#include <vector>

namespace icrdn {

namespace nn = torch::nn;

namespace {

auto conv(int in, int out, int kernel, int stride = 1, bool bias = false) -> nn::Conv2d {
    return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2).bias(bias));
}

// Shared tail: global average pool, flatten, linear projection.
auto pooled_head(int channels, int out_dim) -> nn::Sequential {
    return nn::Sequential(nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)), nn::Flatten(),
                          nn::Linear(channels, out_dim));
}

class SmallCnnImpl : public nn::Module {
public:
    SmallCnnImpl(int in_channels, int out_dim) {
        const std::vector<int> widths{16, 32, 64, 128};
        int in = in_channels;
        for (int w : widths) {
            body->push_back(conv(in, w, 3));
            body->push_back(nn::BatchNorm2d(w));
            body->push_back(nn::ReLU());
            body->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(2)));
            in = w;
        }
        register_module("body", body);
        head = register_module("head", pooled_head(in, out_dim));
    }
    auto forward(torch::Tensor x) -> torch::Tensor { return head->forward(body->forward(x)); }

private:
    nn::Sequential body;
    nn::Sequential head{nullptr};
};
TORCH_MODULE(SmallCnn);

class SmallResNetImpl : public nn::Module {
public:
    SmallResNetImpl(int in_channels, int out_dim, int base_width) {
        stem->push_back(conv(in_channels, base_width, 3, 2));
        stem->push_back(nn::BatchNorm2d(base_width));
        stem->push_back(nn::ReLU());
        int in = base_width;
        for (int stage = 0; stage < 4; ++stage) {
            const int out = base_width << std::min(stage, 3);
            stages->push_back(BasicBlock(in, out, 2));
            in = out;
        }
        register_module("stem", stem);
        register_module("stages", stages);
        head = register_module("head", pooled_head(in, out_dim));
    }
    auto forward(torch::Tensor x) -> torch::Tensor { return head->forward(stages->forward(stem->forward(x))); }

private:
    nn::Sequential stem;
    nn::Sequential stages;
    nn::Sequential head{nullptr};
};
TORCH_MODULE(SmallResNet);

class VggImpl : public nn::Module {
public:
    // `config` lists conv widths; 0 marks a max-pool.
    VggImpl(const std::vector<int>& config, int in_channels, int out_dim) {
        int in = in_channels;
        for (int c : config) {
            if (c == 0) {
                features->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(2)));
            } else {
                features->push_back(conv(in, c, 3, 1, true));
                features->push_back(nn::BatchNorm2d(c));
                features->push_back(nn::ReLU());
                in = c;
            }
        }
        register_module("features", features);
        head = register_module("head", pooled_head(in, out_dim));
    }
    auto forward(torch::Tensor x) -> torch::Tensor { return head->forward(features->forward(x)); }

private:
    nn::Sequential features;
    nn::Sequential head{nullptr};
};
TORCH_MODULE(Vgg);

class BottleneckImpl : public nn::Module {
public:
    static constexpr int kExpansion = 4;
    BottleneckImpl(int in, int width, int stride)
        : conv1(conv(in, width, 1)),
          conv2(conv(width, width, 3, stride)),
          conv3(conv(width, width * kExpansion, 1)),
          bn1(width),
          bn2(width),
          bn3(width * kExpansion) {
        register_module("conv1", conv1);
        register_module("conv2", conv2);
        register_module("conv3", conv3);
        register_module("bn1", bn1);
        register_module("bn2", bn2);
        register_module("bn3", bn3);
        if (stride != 1 || in != width * kExpansion) {
            shortcut = nn::Sequential(conv(in, width * kExpansion, 1, stride), nn::BatchNorm2d(width * kExpansion));
            register_module("shortcut", shortcut);
        }
    }
    auto forward(torch::Tensor x) -> torch::Tensor {
        auto out = torch::relu(bn1(conv1(x)));
        out = torch::relu(bn2(conv2(out)));
        out = bn3(conv3(out));
        return torch::relu(out + (shortcut ? shortcut->forward(x) : x));
    }

private:
    nn::Conv2d conv1, conv2, conv3;
    nn::BatchNorm2d bn1, bn2, bn3;
    nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(Bottleneck);

class ResNetImpl : public nn::Module {
public:
    ResNetImpl(bool bottleneck, const std::array<int, 4>& blocks, int in_channels, int out_dim) {
        stem = nn::Sequential(conv(in_channels, 64, 7, 2), nn::BatchNorm2d(64), nn::ReLU(),
                              nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
        register_module("stem", stem);
        int in = 64;
        for (int stage = 0; stage < 4; ++stage) {
            const int width = 64 << stage;
            for (int b = 0; b < blocks[static_cast<std::size_t>(stage)]; ++b) {
                const int stride = (b == 0 && stage > 0) ? 2 : 1;
                if (bottleneck) {
                    layers->push_back(Bottleneck(in, width, stride));
                    in = width * BottleneckImpl::kExpansion;
                } else {
                    layers->push_back(BasicBlock(in, width, stride));
                    in = width;
                }
            }
        }
        register_module("layers", layers);
        head = register_module("head", pooled_head(in, out_dim));
    }
    auto forward(torch::Tensor x) -> torch::Tensor { return head->forward(layers->forward(stem->forward(x))); }

private:
    nn::Sequential stem{nullptr};
    nn::Sequential layers;
    nn::Sequential head{nullptr};
};
TORCH_MODULE(ResNet);

class DenseLayerImpl : public nn::Module {
public:
    DenseLayerImpl(int in, int growth, int bottleneck_width)
        : bn1(in), conv1(conv(in, bottleneck_width * growth, 1)), bn2(bottleneck_width * growth),
          conv2(conv(bottleneck_width * growth, growth, 3)) {
        register_module("bn1", bn1);
        register_module("conv1", conv1);
        register_module("bn2", bn2);
        register_module("conv2", conv2);
    }
    auto forward(torch::Tensor x) -> torch::Tensor {
        auto out = conv1(torch::relu(bn1(x)));
        out = conv2(torch::relu(bn2(out)));
        return torch::cat({x, out}, 1);
    }

private:
    nn::BatchNorm2d bn1;
    nn::Conv2d conv1;
    nn::BatchNorm2d bn2;
    nn::Conv2d conv2;
};
TORCH_MODULE(DenseLayer);

class DenseNetImpl : public nn::Module {
public:
    DenseNetImpl(const std::array<int, 4>& blocks, int growth, int in_channels, int out_dim) {
        int channels = 2 * growth;
        features->push_back(conv(in_channels, channels, 7, 2));
        features->push_back(nn::BatchNorm2d(channels));
        features->push_back(nn::ReLU());
        features->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            for (int l = 0; l < blocks[b]; ++l) {
                features->push_back(DenseLayer(channels, growth, 4));
                channels += growth;
            }
            if (b + 1 < blocks.size()) {
                // Transition: compress by half and downsample.
                features->push_back(nn::BatchNorm2d(channels));
                features->push_back(nn::ReLU());
                features->push_back(conv(channels, channels / 2, 1));
                features->push_back(nn::AvgPool2d(nn::AvgPool2dOptions(2)));
                channels /= 2;
            }
        }
        features->push_back(nn::BatchNorm2d(channels));
        features->push_back(nn::ReLU());
        register_module("features", features);
        head = register_module("head", pooled_head(channels, out_dim));
    }
    auto forward(torch::Tensor x) -> torch::Tensor { return head->forward(features->forward(x)); }

private:
    nn::Sequential features;
    nn::Sequential head{nullptr};
};
TORCH_MODULE(DenseNet);

}  // namespace

BasicBlockImpl::BasicBlockImpl(int in_channels, int out_channels, int stride)
    : conv1(conv(in_channels, out_channels, 3, stride)),
      conv2(conv(out_channels, out_channels, 3)),
      bn1(out_channels),
      bn2(out_channels) {
    register_module("conv1", conv1);
    register_module("conv2", conv2);
    register_module("bn1", bn1);
    register_module("bn2", bn2);
    if (stride != 1 || in_channels != out_channels) {
        shortcut = nn::Sequential(conv(in_channels, out_channels, 1, stride), nn::BatchNorm2d(out_channels));
        register_module("shortcut", shortcut);
    }
}

auto BasicBlockImpl::forward(torch::Tensor x) -> torch::Tensor {
    auto out = torch::relu(bn1(conv1(x)));
    out = bn2(conv2(out));
    return torch::relu(out + (shortcut ? shortcut->forward(x) : x));
}

auto make_backbone(Backbone kind, int in_channels, int out_dim) -> nn::AnyModule {
    constexpr int M = 0;
    switch (kind) {
        case Backbone::SmallCnn: return nn::AnyModule(SmallCnn(in_channels, out_dim));
        case Backbone::Vgg16:
            return nn::AnyModule(Vgg(std::vector<int>{64, 64, M, 128, 128, M, 256, 256, 256, M, 512, 512, 512, M, 512,
                                                      512, 512, M},
                                     in_channels, out_dim));
        case Backbone::Vgg19:
            return nn::AnyModule(Vgg(std::vector<int>{64, 64, M, 128, 128, M, 256, 256, 256, 256, M, 512, 512, 512, 512,
                                                      M, 512, 512, 512, 512, M},
                                     in_channels, out_dim));
        case Backbone::ResNet18: return nn::AnyModule(ResNet(false, std::array<int, 4>{2, 2, 2, 2}, in_channels, out_dim));
        case Backbone::ResNet50: return nn::AnyModule(ResNet(true, std::array<int, 4>{3, 4, 6, 3}, in_channels, out_dim));
        case Backbone::DenseNet121: return nn::AnyModule(DenseNet(std::array<int, 4>{6, 12, 24, 16}, 32, in_channels, out_dim));
    }
    throw std::invalid_argument("unknown backbone");
}

auto make_small_resnet(int in_channels, int out_dim, int base_width) -> nn::AnyModule {
    return nn::AnyModule(SmallResNet(in_channels, out_dim, base_width));
}

}  // namespace icrdn
