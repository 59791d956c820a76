#pragma once

#include <deque>
#include <memory>
#include <stdexcept>
#include <vector>

#include "patchwork/attention.hpp"
#include "patchwork/grad.hpp"
#include "patchwork/model.hpp"
#include "patchwork/rewards.hpp"
#include "patchwork/synthetic.hpp"

namespace patchwork {

// One recorded step: the tapped memory and action history the policy saw
// when the action was chosen, and the state it landed in. Memories are
// shared pointers so consecutive transitions alias rather than copy.
struct Transition {
    std::shared_ptr<const Tensor> state;
    std::vector<float> history;
    int action = 0;
    float reward = 0.0f;
    std::shared_ptr<const Tensor> next_state;
    std::vector<float> next_history;
    bool terminal = false;
};

struct TrainerConfig {
    double gamma = 0.9;
    double lr = 0.05;
    int target_sync = 200;
    double epsilon_start = 1.0;
    double epsilon_end = 0.05;
    int epsilon_decay_steps = 0;  // 0 = half of training, set by the caller
    int replay_capacity = 10000;
    int batch_size = 32;
    int train_every = 4;  // one update per this many environment frames
    int warmup = 500;     // replay size before updates start

    void validate() const {
        if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("TrainerConfig: gamma in [0,1)");
        if (lr <= 0.0) throw std::invalid_argument("TrainerConfig: lr must be positive");
        if (target_sync < 1 || replay_capacity < 1 || batch_size < 1 || train_every < 1)
            throw std::invalid_argument("TrainerConfig: counts must be positive");
    }
};

// Fixed-capacity uniform replay buffer with deterministic sampling.
class ReplayBuffer {
  public:
    explicit ReplayBuffer(int capacity) : capacity_(static_cast<std::size_t>(capacity)) {
        if (capacity < 1) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
    }

    void push(Transition t) {
        if (data_.size() < capacity_) {
            data_.push_back(std::move(t));
        } else {
            data_[write_] = std::move(t);
        }
        write_ = (write_ + 1) % capacity_;
    }

    std::size_t size() const { return data_.size(); }

    std::vector<const Transition*> sample(int batch, Rng& rng) const {
        if (data_.empty()) throw std::invalid_argument("ReplayBuffer: empty");
        std::vector<const Transition*> out;
        out.reserve(static_cast<std::size_t>(batch));
        for (int i = 0; i < batch; ++i)
            out.push_back(&data_[static_cast<std::size_t>(rng.uniform_int(
                static_cast<int>(data_.size())))]);
        return out;
    }

  private:
    std::size_t capacity_;
    std::size_t write_ = 0;
    std::vector<Transition> data_;
};

inline QNet sync_target(const QNet& online) { return online; }

// Double-Q target: the online net picks the argmax action, the delayed copy
// evaluates it.
inline double ddqn_target(double reward, const Tensor& next_state,
                          const std::vector<float>& next_history, bool terminal, const QNet& online,
                          const QNet& target, double gamma) {
    if (!online.same_topology(target))
        throw std::invalid_argument("ddqn_target: online/target topology mismatch");
    if (terminal) return reward;
    ActionHistory h;
    h.f = next_history;
    const std::vector<float> q_online = q_values(next_state, h, online);
    const int best = argmax_action(q_online);
    const std::vector<float> q_target = q_values(next_state, h, target);
    return reward + gamma * q_target[static_cast<std::size_t>(best)];
}

// Parameter gradients of one QNet.
struct QNetGrad {
    ConvGrad conv1, conv2;
    std::vector<float> dense_w, dense_b;

    explicit QNetGrad(const QNet& net)
        : conv1(net.conv1),
          conv2(net.conv2),
          dense_w(net.dense_w.size(), 0.0f),
          dense_b(net.dense_b.size(), 0.0f) {}

    void zero() {
        conv1.zero();
        conv2.zero();
        std::fill(dense_w.begin(), dense_w.end(), 0.0f);
        std::fill(dense_b.begin(), dense_b.end(), 0.0f);
    }
};

// Accumulates d(dq * Q[action])/d(params) into grad. Only the chosen
// action's output row contributes.
inline void qnet_backward(const QNet& net, const QNetCache& cache, int action, double dq,
                          QNetGrad& grad) {
    if (action < 0 || action >= net.num_actions)
        throw std::invalid_argument("qnet_backward: action out of range");
    const int din = net.dense_in();
    const float* wrow = &net.dense_w[static_cast<std::size_t>(action) * din];
    grad.dense_b[static_cast<std::size_t>(action)] += static_cast<float>(dq);
    float* gw = &grad.dense_w[static_cast<std::size_t>(action) * din];

    Tensor d_post2(cache.post2.rows, cache.post2.cols, cache.post2.channels);
    const int flat = net.flat_size();
    for (int j = 0; j < din; ++j) {
        gw[j] += static_cast<float>(dq * cache.dense_input[static_cast<std::size_t>(j)]);
        if (j < flat)
            d_post2.data[static_cast<std::size_t>(j)] = static_cast<float>(dq * wrow[j]);
        // history entries carry no parameter gradient
    }

    relu_backward_inplace(d_post2, cache.pre2);
    Tensor d_post1 = conv2d_same_backward(cache.post1, net.conv2, 2, d_post2, grad.conv2);
    relu_backward_inplace(d_post1, cache.pre1);
    conv2d_same_backward(cache.input, net.conv1, 2, d_post1, grad.conv1);
}

struct QNetOpt {
    SgdState conv1_v, conv1_b, conv2_v, conv2_b, dense_v, dense_b;
};

inline void apply_qnet_grad(QNet& net, const QNetGrad& grad, QNetOpt& opt, double lr,
                            double momentum, double scale) {
    sgd_step(net.conv1.values, grad.conv1.values, opt.conv1_v, lr, momentum, scale);
    sgd_step(net.conv1.bias, grad.conv1.bias, opt.conv1_b, lr, momentum, scale);
    sgd_step(net.conv2.values, grad.conv2.values, opt.conv2_v, lr, momentum, scale);
    sgd_step(net.conv2.bias, grad.conv2.bias, opt.conv2_b, lr, momentum, scale);
    sgd_step(net.dense_w, grad.dense_w, opt.dense_v, lr, momentum, scale);
    sgd_step(net.dense_b, grad.dense_b, opt.dense_b, lr, momentum, scale);
}

// One TD step over a sampled batch; moves parameters along the per-sample
// gradient of the taken action's Q value scaled by the TD error, averaged
// over the batch. Returns the mean squared TD error.
inline double td_update_inplace(QNet& net, const std::vector<const Transition*>& batch,
                                const QNet& target, const TrainerConfig& cfg, QNetGrad& grad,
                                QNetOpt& opt) {
    if (batch.empty()) throw std::invalid_argument("td_update: empty batch");
    grad.zero();
    double loss = 0.0;
    for (const Transition* t : batch) {
        const double y = ddqn_target(t->reward, *t->next_state, t->next_history, t->terminal, net,
                                     target, cfg.gamma);
        ActionHistory h;
        h.f = t->history;
        QNetCache cache;
        const std::vector<float> q = q_values_cached(*t->state, h, net, &cache);
        const double delta = y - q[static_cast<std::size_t>(t->action)];
        loss += delta * delta;
        // ascent along delta * dQ/dtheta, i.e. SGD on the squared TD error
        qnet_backward(net, cache, t->action, delta, grad);
    }
    const double scale = -1.0 / static_cast<double>(batch.size());  // ascent
    apply_qnet_grad(net, grad, opt, cfg.lr, 0.0, scale);
    return loss / static_cast<double>(batch.size());
}

inline QNet td_update(const QNet& net, const std::vector<const Transition*>& batch,
                      const QNet& target, const TrainerConfig& cfg) {
    QNet out = net;
    QNetGrad grad(out);
    QNetOpt opt;
    td_update_inplace(out, batch, target, cfg, grad, opt);
    return out;
}

// ---- episode rollout ----

struct EpisodeResult {
    std::vector<double> det_f;     // per-frame box overlap metric
    std::vector<double> seg_miou;  // per-frame mask mIoU
    std::vector<double> rewards;   // TD(0) rewards per frame
    std::vector<Transition> transitions;
    double mean_det_f = 0.0;
    double mean_seg_miou = 0.0;
    double total_reward = 0.0;
};

namespace detail {

inline void finalize_episode(EpisodeResult& r) {
    double fsum = 0.0, msum = 0.0;
    for (const double v : r.det_f) fsum += v;
    for (const double v : r.seg_miou) msum += v;
    for (const double v : r.rewards) r.total_reward += v;
    r.mean_det_f = r.det_f.empty() ? 0.0 : fsum / static_cast<double>(r.det_f.size());
    r.mean_seg_miou = r.seg_miou.empty() ? 0.0 : msum / static_cast<double>(r.seg_miou.size());
}

}  // namespace detail

// Plays one episode with the session's policy. When collecting, the
// transition stream links the tapped memory and history across frames;
// rewards are the clamped per-frame improvement of the detection metric over
// keeping the previous predictions.
inline EpisodeResult run_episode(StreamSession& session, const Episode& episode,
                                 bool collect = false) {
    EpisodeResult result;
    const StreamModel& model = *session.model;
    const int tap = model.tap_index();

    std::shared_ptr<const Tensor> prev_state;
    std::vector<float> prev_history;
    if (collect) {
        prev_state = std::make_shared<Tensor>(model.tap_geometry().state_rows(),
                                              model.tap_geometry().state_cols(),
                                              model.tap_channels());
        prev_history.assign(session.history.f.size(), 0.0f);
    }

    std::vector<Box> prev_boxes = session.last_boxes;
    for (std::size_t t = 0; t < episode.frames.size(); ++t) {
        const StepResult res = step(session, episode.frames[t]);
        const auto& gt = episode.gt_boxes[t];
        const double f_prev = box_overlap_metric(gt, prev_boxes);
        const double f_curr = box_overlap_metric(gt, res.boxes);
        const double reward = td0_reward(f_curr, f_prev);
        result.det_f.push_back(f_curr);
        result.seg_miou.push_back(mask_miou(episode.gt_masks[t], res.mask));
        result.rewards.push_back(reward);
        prev_boxes = res.boxes;

        if (collect) {
            auto state = std::make_shared<Tensor>(session.cells[static_cast<std::size_t>(tap)].memory);
            Transition tr;
            tr.state = prev_state;
            tr.history = prev_history;
            tr.action = res.action;
            tr.reward = static_cast<float>(reward);
            tr.next_state = state;
            tr.next_history = session.history.f;
            tr.terminal = t + 1 == episode.frames.size();
            result.transitions.push_back(std::move(tr));
            prev_state = std::move(state);
            prev_history = session.history.f;
        }
    }
    detail::finalize_episode(result);
    return result;
}

// Evaluates the single-cell-at-input variant under the scanning order.
inline EpisodeResult run_episode_single_cell(SingleCellSession& session, const Episode& episode) {
    EpisodeResult result;
    const int num_actions = static_cast<int>(session.windows.size());
    std::vector<Box> prev_boxes = session.last_boxes;
    for (std::size_t t = 0; t < episode.frames.size(); ++t) {
        const StepResult res =
            step(session, episode.frames[t], static_cast<int>(t) % num_actions);
        const auto& gt = episode.gt_boxes[t];
        result.rewards.push_back(td0_reward(box_overlap_metric(gt, res.boxes),
                                            box_overlap_metric(gt, prev_boxes)));
        result.det_f.push_back(box_overlap_metric(gt, res.boxes));
        result.seg_miou.push_back(mask_miou(episode.gt_masks[t], res.mask));
        prev_boxes = res.boxes;
    }
    detail::finalize_episode(result);
    return result;
}

// Single-frame baseline: the stateless model runs on keyframes spaced
// `interval` apart, its predictions become visible `delay` frames later and
// are copied until the next refresh arrives.
inline EpisodeResult run_episode_single_frame(const StreamModel& model, const Episode& episode,
                                              int interval, int delay) {
    if (interval < 1 || delay < 0)
        throw std::invalid_argument("run_episode_single_frame: bad interval/delay");
    EpisodeResult result;
    const int frames = static_cast<int>(episode.frames.size());

    // predictions computed on keyframes, indexed by keyframe time
    std::vector<int> available_from;   // time each keyframe's output becomes usable
    std::vector<StatelessResult> outs;
    for (int k = 0; k < frames; k += interval) {
        outs.push_back(stateless_forward(model, episode.frames[static_cast<std::size_t>(k)]));
        available_from.push_back(k + delay);
    }

    std::vector<Box> prev_boxes;
    for (int t = 0; t < frames; ++t) {
        int use = -1;
        for (std::size_t k = 0; k < outs.size(); ++k)
            if (available_from[k] <= t) use = static_cast<int>(k);
        std::vector<Box> boxes;
        Mask mask(episode.gt_masks[static_cast<std::size_t>(t)].rows,
                  episode.gt_masks[static_cast<std::size_t>(t)].cols);
        if (use >= 0) {
            boxes = outs[static_cast<std::size_t>(use)].boxes;
            mask = outs[static_cast<std::size_t>(use)].mask;
        }
        const auto& gt = episode.gt_boxes[static_cast<std::size_t>(t)];
        result.rewards.push_back(
            td0_reward(box_overlap_metric(gt, boxes), box_overlap_metric(gt, prev_boxes)));
        result.det_f.push_back(box_overlap_metric(gt, boxes));
        result.seg_miou.push_back(mask_miou(episode.gt_masks[static_cast<std::size_t>(t)], mask));
        prev_boxes = boxes;
    }
    detail::finalize_episode(result);
    return result;
}

}  // namespace patchwork
