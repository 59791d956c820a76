#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchwork/frac.hpp"
#include "patchwork/rng.hpp"
#include "patchwork/tensor.hpp"

namespace patchwork {

// One attention window: top-left corner (a, b) and size (h, w), all relative
// to the frame. a is the row offset, b the column offset.
struct Window {
    Frac a, b, h, w;
};

// Discrete crop grid: each frame dimension is sliced m times, a window spans
// n adjacent slices. (m - n + 1)^2 windows with corners at i/m.
struct ActionSpace {
    int m = 1;
    int n = 1;

    ActionSpace() = default;
    ActionSpace(int m_, int n_) : m(m_), n(n_) {
        if (m < 1 || n < 1 || n > m)
            throw std::invalid_argument("ActionSpace: need 1 <= n <= m, got m=" +
                                        std::to_string(m) + " n=" + std::to_string(n));
    }

    int num_actions() const {
        const int q = m - n + 1;
        return q * q;
    }

    Frac window_rel() const { return Frac(n, m); }
};

// Windows in row-major corner order; this order also defines the scanning
// policy's cycle.
inline std::vector<Window> enumerate_actions(const ActionSpace& space) {
    const Frac rel = space.window_rel();
    const int q = space.m - space.n + 1;
    std::vector<Window> out;
    out.reserve(static_cast<std::size_t>(q) * q);
    for (int i = 0; i < q; ++i) {
        for (int j = 0; j < q; ++j) {
            out.push_back({Frac(i, space.m), Frac(j, space.m), rel, rel});
        }
    }
    return out;
}

// Exponentially decaying, clamped record of recently taken actions:
// F <- min(decay * F + onehot(action), 1).
struct ActionHistory {
    std::vector<float> f;
    float decay = 0.7f;

    ActionHistory() = default;
    ActionHistory(int num_actions, float decay_)
        : f(static_cast<std::size_t>(num_actions), 0.0f), decay(decay_) {
        if (decay < 0.0f || decay >= 1.0f)
            throw std::invalid_argument("ActionHistory: decay must be in [0,1)");
    }
};

inline ActionHistory update_history(const ActionHistory& prev, int action) {
    if (action < 0 || action >= static_cast<int>(prev.f.size()))
        throw std::invalid_argument("update_history: action index out of range");
    ActionHistory next = prev;
    for (auto& v : next.f) v = std::min(v * prev.decay, 1.0f);
    next.f[static_cast<std::size_t>(action)] =
        std::min(next.f[static_cast<std::size_t>(action)] + 1.0f, 1.0f);
    return next;
}

// Small value network over a tapped cell memory: two stride-2 convolutions,
// then one dense layer on the flattened features concatenated with the
// action history.
struct QNet {
    int in_rows = 1, in_cols = 1, in_channels = 1;
    int num_actions = 1;
    ConvWeights conv1, conv2;
    std::vector<float> dense_w;  // [num_actions][flat + num_actions]
    std::vector<float> dense_b;  // [num_actions]

    int conv1_rows() const { return same_out_extent(in_rows, 2); }
    int conv1_cols() const { return same_out_extent(in_cols, 2); }
    int conv2_rows() const { return same_out_extent(conv1_rows(), 2); }
    int conv2_cols() const { return same_out_extent(conv1_cols(), 2); }
    int flat_size() const { return conv2_rows() * conv2_cols() * conv2.out_channels; }
    int dense_in() const { return flat_size() + num_actions; }

    std::size_t param_count() const {
        return conv1.values.size() + conv1.bias.size() + conv2.values.size() + conv2.bias.size() +
               dense_w.size() + dense_b.size();
    }

    bool same_topology(const QNet& o) const {
        return in_rows == o.in_rows && in_cols == o.in_cols && in_channels == o.in_channels &&
               num_actions == o.num_actions &&
               conv1.out_channels == o.conv1.out_channels &&
               conv2.out_channels == o.conv2.out_channels;
    }
};

inline QNet make_qnet(int in_rows, int in_cols, int in_channels, int num_actions, Rng& rng,
                      int conv1_channels = 8, int conv2_channels = 16) {
    QNet net;
    net.in_rows = in_rows;
    net.in_cols = in_cols;
    net.in_channels = in_channels;
    net.num_actions = num_actions;
    net.conv1 = ConvWeights::dense_random(3, 3, in_channels, conv1_channels, rng);
    net.conv2 = ConvWeights::dense_random(3, 3, conv1_channels, conv2_channels, rng);
    const int din = net.dense_in();
    net.dense_w.assign(static_cast<std::size_t>(num_actions) * din, 0.0f);
    const double scale = std::sqrt(1.0 / din);
    for (auto& v : net.dense_w) v = static_cast<float>(rng.normal(0.0, scale));
    net.dense_b.assign(static_cast<std::size_t>(num_actions), 0.0f);
    return net;
}

// Intermediate activations of one forward pass, kept for backprop.
struct QNetCache {
    Tensor input;
    Tensor pre1, post1;
    Tensor pre2, post2;
    std::vector<float> dense_input;
    std::vector<float> q;
};

inline std::vector<float> q_values_cached(const Tensor& memory, const ActionHistory& history,
                                          const QNet& net, QNetCache* cache = nullptr) {
    if (memory.rows != net.in_rows || memory.cols != net.in_cols ||
        memory.channels != net.in_channels)
        throw std::invalid_argument("q_values: memory " + memory.shape_str() +
                                    " does not match net input geometry");
    if (static_cast<int>(history.f.size()) != net.num_actions)
        throw std::invalid_argument("q_values: history length mismatch");

    Tensor pre1 = conv2d_same(memory, net.conv1, 2);
    Tensor post1 = relu(pre1);
    Tensor pre2 = conv2d_same(post1, net.conv2, 2);
    Tensor post2 = relu(pre2);

    std::vector<float> dense_input;
    dense_input.reserve(post2.data.size() + history.f.size());
    dense_input.insert(dense_input.end(), post2.data.begin(), post2.data.end());
    dense_input.insert(dense_input.end(), history.f.begin(), history.f.end());

    const int din = net.dense_in();
    std::vector<float> q(static_cast<std::size_t>(net.num_actions));
    for (int a = 0; a < net.num_actions; ++a) {
        double acc = net.dense_b[static_cast<std::size_t>(a)];
        const float* wrow = &net.dense_w[static_cast<std::size_t>(a) * din];
        for (int j = 0; j < din; ++j) acc += static_cast<double>(wrow[j]) * dense_input[static_cast<std::size_t>(j)];
        q[static_cast<std::size_t>(a)] = static_cast<float>(acc);
    }

    if (cache) {
        cache->input = memory;
        cache->pre1 = std::move(pre1);
        cache->post1 = std::move(post1);
        cache->pre2 = std::move(pre2);
        cache->post2 = std::move(post2);
        cache->dense_input = std::move(dense_input);
        cache->q = q;
    }
    return q;
}

inline std::vector<float> q_values(const Tensor& memory, const ActionHistory& history,
                                   const QNet& net) {
    return q_values_cached(memory, history, net, nullptr);
}

enum class Policy { random, scanning, greedy, epsilon_greedy };

inline Policy parse_policy(const std::string& s) {
    if (s == "random") return Policy::random;
    if (s == "scanning") return Policy::scanning;
    if (s == "greedy" || s == "dqn") return Policy::greedy;
    if (s == "epsilon_greedy") return Policy::epsilon_greedy;
    throw std::invalid_argument("unknown policy '" + s + "'");
}

inline int argmax_action(const std::vector<float>& q) {
    if (q.empty()) throw std::invalid_argument("argmax_action: empty q vector");
    int best = 0;
    for (int i = 1; i < static_cast<int>(q.size()); ++i)
        if (q[static_cast<std::size_t>(i)] > q[static_cast<std::size_t>(best)]) best = i;
    return best;
}

// Picks the next window. Greedy takes the argmax of q (lowest index wins
// ties); scanning cycles through the action space in row-major corner order;
// epsilon_greedy explores uniformly with probability epsilon.
inline int select_action(Policy policy, const std::vector<float>* q, int t, int num_actions,
                         Rng& rng, double epsilon = 0.0) {
    if (num_actions < 1) throw std::invalid_argument("select_action: empty action space");
    switch (policy) {
        case Policy::random:
            return rng.uniform_int(num_actions);
        case Policy::scanning:
            return ((t % num_actions) + num_actions) % num_actions;
        case Policy::greedy:
            if (!q) throw std::invalid_argument("select_action: greedy policy requires q-values");
            return argmax_action(*q);
        case Policy::epsilon_greedy:
            if (rng.bernoulli(epsilon)) return rng.uniform_int(num_actions);
            if (!q) throw std::invalid_argument("select_action: epsilon-greedy requires q-values");
            return argmax_action(*q);
    }
    throw std::logic_error("select_action: unreachable");
}

}  // namespace patchwork
