#pragma once

// Convolutional encoder/decoder over a [N x C x T x W] grid. Kernels are
// separable: 3x1 along time, 1x3 along the joint axis. Temporal
// downsampling uses stride-(2,1) 4x1 convolutions; the decoder mirrors it
// with nearest-neighbour upsampling.

#include "stm/numerics/nn.hpp"

#include <string>
#include <vector>

namespace stm {

template <class T>
struct ResBlock {
    nn::Conv2d<T> time_conv;   // 3x1
    nn::Conv2d<T> joint_conv;  // 1x3

    ResBlock() = default;
    ResBlock(ParamStore<T>& ps, const std::string& name, std::size_t width, Rng& rng)
        : time_conv(ps, name + ".time", width, width, 3, 1, {1, 1, 1, 0}, rng),
          joint_conv(ps, name + ".joint", width, width, 1, 3, {1, 1, 0, 1}, rng) {}

    Var<T> operator()(Graph<T>& g, Var<T> x) const {
        Var<T> h = time_conv(g, ag::relu(x));
        h = joint_conv(g, ag::relu(h));
        return ag::add(x, h);
    }
};

inline std::size_t downscale_stages(std::size_t downscale) {
    switch (downscale) {
        case 1: return 0;
        case 2: return 1;
        case 4: return 2;
        default: throw std::invalid_argument("downscale must be 1, 2 or 4");
    }
}

template <class T>
struct ConvEncoder {
    nn::Conv2d<T> in;
    std::vector<nn::Conv2d<T>> down;
    std::vector<ResBlock<T>> blocks;
    nn::Conv2d<T> out;

    ConvEncoder() = default;
    ConvEncoder(ParamStore<T>& ps, const std::string& name, std::size_t in_ch, std::size_t width,
                std::size_t code_dim, std::size_t downscale, Rng& rng)
        : in(ps, name + ".in", in_ch, width, 3, 1, {1, 1, 1, 0}, rng) {
        const std::size_t stages = downscale_stages(downscale);
        for (std::size_t s = 0; s < 2; ++s) {
            if (s < stages)
                down.emplace_back(ps, name + ".down" + std::to_string(s), width, width, 4, 1, ag::Conv2dSpec{2, 1, 1, 0},
                                  rng);
            blocks.emplace_back(ps, name + ".res" + std::to_string(s), width, rng);
        }
        out = nn::Conv2d<T>(ps, name + ".out", width, code_dim, 3, 1, {1, 1, 1, 0}, rng);
    }

    /// [N x Cin x T x W] -> [N x d x T/downscale x W]
    Var<T> operator()(Graph<T>& g, Var<T> x) const {
        Var<T> h = in(g, x);
        for (std::size_t s = 0; s < blocks.size(); ++s) {
            if (s < down.size()) h = ag::relu(down[s](g, h));
            h = blocks[s](g, h);
        }
        return out(g, ag::relu(h));
    }
};

template <class T>
struct ConvDecoder {
    nn::Conv2d<T> in;
    std::vector<ResBlock<T>> blocks;
    std::vector<nn::Conv2d<T>> up;
    nn::Conv2d<T> out;

    ConvDecoder() = default;
    ConvDecoder(ParamStore<T>& ps, const std::string& name, std::size_t code_dim, std::size_t width,
                std::size_t out_ch, std::size_t downscale, Rng& rng)
        : in(ps, name + ".in", code_dim, width, 3, 1, {1, 1, 1, 0}, rng) {
        const std::size_t stages = downscale_stages(downscale);
        for (std::size_t s = 0; s < 2; ++s) {
            blocks.emplace_back(ps, name + ".res" + std::to_string(s), width, rng);
            if (s < stages)
                up.emplace_back(ps, name + ".up" + std::to_string(s), width, width, 3, 1, ag::Conv2dSpec{1, 1, 1, 0},
                                rng);
        }
        out = nn::Conv2d<T>(ps, name + ".out", width, out_ch, 3, 1, {1, 1, 1, 0}, rng);
    }

    /// [N x d x T' x W] -> [N x Cout x T'*downscale x W]
    Var<T> operator()(Graph<T>& g, Var<T> z) const {
        Var<T> h = in(g, z);
        for (std::size_t s = 0; s < blocks.size(); ++s) {
            h = blocks[s](g, h);
            if (s < up.size()) h = ag::relu(up[s](g, ag::upsample_rows(h, 2)));
        }
        return out(g, ag::relu(h));
    }
};

}  // namespace stm
