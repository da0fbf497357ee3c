// Two-phase training: identity/critic pretraining, then the alternating
// minimax loop with K_T transport updates per critic update.
//
// Sign conventions follow the dual problem: the critic ascends
// E[f(y,c)] - E[f(T(x,z,c),c)] (implemented as minimizing the WGAN-style
// critic loss, the negation), the transport map descends
// E[cost(x,T)] - E[f(T)]. The critic_ascent flag flips the critic's sign
// for the role-swap regression test.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cotmap/io.hpp"
#include "cotmap/matrix.hpp"
#include "cotmap/networks.hpp"
#include "cotmap/optim.hpp"
#include "cotmap/rng.hpp"
#include "cotmap/tensor.hpp"

namespace cotmap {

struct TrainConfig {
    std::size_t steps = 5000;    // outer steps of the alternating loop
    std::size_t k_transport = 5; // transport updates per critic update
    std::size_t batch_x = 32;
    std::size_t batch_y = 32;
    std::size_t batch_z = 1; // noise draws per source sample

    double lr_transport = 2e-5;
    double lr_critic = 3e-5;
    double wd_transport = 0.03;
    double wd_critic = 0.03;
    double clip_norm = 1.0;

    bool pretrain = true;
    std::size_t pretrain_steps = 500;
    double pretrain_lr = 1e-4;
    double pretrain_wd = 0.01;

    double lambda_smooth = 1.0;
    double lambda_transport = 1.0;
    double lambda_mag = 1.0;
    double smooth_sigma = 0.05;

    double beta_alpha = 0.95; // continuous condition sampling Beta(a,b)
    double beta_beta = 0.95;

    std::uint64_t seed = 1;
    std::size_t checkpoint_interval = 1000; // also the NaN-recovery snapshot cadence
    std::size_t eval_interval = 0;          // 0 disables in-training evaluation
    std::size_t log_interval = 1;

    bool critic_ascent = true; // false swaps the critic's role (ablation/regression)
};

inline json train_config_to_json(const TrainConfig& c) {
    return json{{"steps", c.steps},
                {"k_transport", c.k_transport},
                {"batch_x", c.batch_x},
                {"batch_y", c.batch_y},
                {"batch_z", c.batch_z},
                {"lr_transport", c.lr_transport},
                {"lr_critic", c.lr_critic},
                {"wd_transport", c.wd_transport},
                {"wd_critic", c.wd_critic},
                {"clip_norm", c.clip_norm},
                {"pretrain", c.pretrain},
                {"pretrain_steps", c.pretrain_steps},
                {"pretrain_lr", c.pretrain_lr},
                {"pretrain_wd", c.pretrain_wd},
                {"lambda_smooth", c.lambda_smooth},
                {"lambda_transport", c.lambda_transport},
                {"lambda_mag", c.lambda_mag},
                {"smooth_sigma", c.smooth_sigma},
                {"beta_alpha", c.beta_alpha},
                {"beta_beta", c.beta_beta},
                {"seed", c.seed},
                {"checkpoint_interval", c.checkpoint_interval},
                {"eval_interval", c.eval_interval},
                {"log_interval", c.log_interval},
                {"critic_ascent", c.critic_ascent}};
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("steps", c.steps);
    get("k_transport", c.k_transport);
    get("batch_x", c.batch_x);
    get("batch_y", c.batch_y);
    get("batch_z", c.batch_z);
    get("lr_transport", c.lr_transport);
    get("lr_critic", c.lr_critic);
    get("wd_transport", c.wd_transport);
    get("wd_critic", c.wd_critic);
    get("clip_norm", c.clip_norm);
    get("pretrain", c.pretrain);
    get("pretrain_steps", c.pretrain_steps);
    get("pretrain_lr", c.pretrain_lr);
    get("pretrain_wd", c.pretrain_wd);
    get("lambda_smooth", c.lambda_smooth);
    get("lambda_transport", c.lambda_transport);
    get("lambda_mag", c.lambda_mag);
    get("smooth_sigma", c.smooth_sigma);
    get("beta_alpha", c.beta_alpha);
    get("beta_beta", c.beta_beta);
    get("seed", c.seed);
    get("checkpoint_interval", c.checkpoint_interval);
    get("eval_interval", c.eval_interval);
    get("log_interval", c.log_interval);
    get("critic_ascent", c.critic_ascent);
    return c;
}

// Sampling domain of the condition space.
struct ConditionSpec {
    std::size_t n_categories = 0;
    bool continuous = false;
    double beta_alpha = 0.95;
    double beta_beta = 0.95;

    bool active() const { return n_categories > 0 || continuous; }
};

// Discrete part uniform over categories; continuous part Beta(a,b) on [0,1],
// which slightly oversamples the boundary region for a < 1.
inline std::optional<Condition> sample_condition(const ConditionSpec& spec, Rng& rng) {
    if (!spec.active()) return std::nullopt;
    Condition c;
    if (spec.n_categories > 0) c.discrete = rng.index(spec.n_categories);
    if (spec.continuous) c.continuous = rng.beta(spec.beta_alpha, spec.beta_beta);
    return c;
}

// Data access for the training loop. Batches are drawn fresh per step; the
// target sampler receives the active condition for conditional families.
struct TrainingTask {
    std::function<Matrix(std::size_t, Rng&)> sample_source;
    std::function<Matrix(std::size_t, const std::optional<Condition>&, Rng&)> sample_target;
    ConditionSpec cond_spec;
};

namespace detail {

inline void set_requires_grad(const std::vector<Tensor*>& params, bool v) {
    for (auto* p : params) p->set_requires_grad(v);
}

inline void zero_grads(const std::vector<Tensor*>& params) {
    for (auto* p : params) p->zero_grad();
}

// x replicated row-block-wise for multiple noise draws per sample.
inline Matrix repeat_rows(const Matrix& m, std::size_t times) {
    if (times == 1) return m;
    Matrix out(m.rows * times, m.cols);
    for (std::size_t t = 0; t < times; ++t)
        std::copy(m.data.begin(), m.data.end(), out.data.begin() + t * m.data.size());
    return out;
}

} // namespace detail

// E[||T(x,z,c) - x||^2]; the tape owns the graph, caller backpropagates.
inline Tensor identity_pretrain_loss(Tape& tape, const Model& model, const Matrix& x_batch,
                                     const Tensor& z, const std::optional<Condition>& c) {
    Tensor x = batch_tensor(x_batch);
    Tensor y = model.transport_forward(tape, x, z, c);
    return tape.mean(tape.sq_l2(y, x));
}

// E[(f(x+eps,c) - f(x,c))^2] with eps ~ N(0, sigma^2); zero when sigma == 0.
template <typename CriticFn>
Tensor critic_smoothness_loss(Tape& tape, CriticFn&& critic, const Matrix& x_batch, double sigma,
                              Rng& rng) {
    Tensor x = batch_tensor(x_batch);
    Matrix perturbed = x_batch;
    for (auto& v : perturbed.data) v += sigma == 0.0 ? 0.0 : rng.normal(0.0, sigma);
    Tensor xp = batch_tensor(perturbed);
    Tensor d = tape.sub(critic(tape, xp), critic(tape, x));
    return tape.mean(tape.mul(d, d));
}

// E[f(T(x,z,c),c)] - E[f(y,c)]: the critic's discrimination objective.
template <typename CriticFn>
Tensor critic_transport_loss(Tape& tape, CriticFn&& critic, const Tensor& transported,
                             const Matrix& y_batch) {
    Tensor fy = critic(tape, batch_tensor(y_batch));
    Tensor ft = critic(tape, transported.detached());
    return tape.sub(tape.mean(ft), tape.mean(fy));
}

// E[(|f(y,c)| - 1)^2] keeps critic magnitudes near unit scale.
template <typename CriticFn>
Tensor critic_magnitude_loss(Tape& tape, CriticFn&& critic, const Matrix& y_batch) {
    Tensor fy = critic(tape, batch_tensor(y_batch));
    Tensor d = tape.add_scalar(tape.abs(fy), -1.0);
    return tape.mean(tape.mul(d, d));
}

struct PretrainResult {
    double initial_loss = 0.0;
    double final_loss = 0.0; // running mean over the last 50 steps
    std::size_t steps = 0;
};

inline PretrainResult pretrain_transport(Model& model, const TrainingTask& task,
                                         const TrainConfig& cfg, Rng& rng) {
    auto params = model.transport_params();
    AdamW opt({.lr = cfg.pretrain_lr, .weight_decay = cfg.pretrain_wd,
               .clip_norm = cfg.clip_norm});
    PretrainResult res;
    res.steps = cfg.pretrain_steps;
    std::vector<double> window;
    for (std::size_t step = 0; step < cfg.pretrain_steps; ++step) {
        auto c = sample_condition(task.cond_spec, rng);
        Matrix xb = task.sample_source(cfg.batch_x, rng);
        Tensor z = sample_noise(xb.rows, model.arch.noise_dim, rng);
        Tape tape;
        Tensor loss = identity_pretrain_loss(tape, model, xb, z, c);
        const double value = loss.item();
        if (step == 0) res.initial_loss = value;
        if (!std::isfinite(value) || (step > 0 && value > 10.0 * std::max(res.initial_loss, 1.0)))
            throw std::runtime_error("pretrain_transport: diverged at step " +
                                     std::to_string(step) + ", loss " + std::to_string(value));
        tape.backward(loss);
        opt.step(params);
        detail::zero_grads(params);
        window.push_back(value);
        if (window.size() > 50) window.erase(window.begin());
    }
    for (double v : window) res.final_loss += v;
    if (!window.empty()) res.final_loss /= static_cast<double>(window.size());
    return res;
}

struct CriticPretrainResult {
    double initial_mag = 0.0;
    double final_mag = 0.0;
    double final_smooth = 0.0;
    double final_transport = 0.0;
};

inline CriticPretrainResult pretrain_critic(Model& model, const TrainingTask& task,
                                            const TrainConfig& cfg, Rng& rng) {
    auto params = model.critic_params();
    auto t_params = model.transport_params();
    AdamW opt({.lr = cfg.pretrain_lr, .weight_decay = cfg.pretrain_wd,
               .clip_norm = cfg.clip_norm});
    CriticPretrainResult res;
    for (std::size_t step = 0; step < cfg.pretrain_steps; ++step) {
        auto c = sample_condition(task.cond_spec, rng);
        Matrix xb = task.sample_source(cfg.batch_x, rng);
        Matrix yb = task.sample_target(cfg.batch_y, c, rng);
        Tensor z = sample_noise(xb.rows, model.arch.noise_dim, rng);

        Tensor transported;
        {
            Tape fwd(false);
            transported = model.transport_forward(fwd, batch_tensor(xb), z, c);
        }

        detail::set_requires_grad(t_params, false);
        Tape tape;
        auto critic = [&](Tape& t, const Tensor& y) { return model.critic_forward(t, y, c); };
        Tensor l_smooth = critic_smoothness_loss(tape, critic, xb, cfg.smooth_sigma, rng);
        Tensor l_transport = critic_transport_loss(tape, critic, transported, yb);
        Tensor l_mag = critic_magnitude_loss(tape, critic, yb);
        Tensor loss = tape.add(tape.add(tape.mul_scalar(l_smooth, cfg.lambda_smooth),
                                        tape.mul_scalar(l_transport, cfg.lambda_transport)),
                               tape.mul_scalar(l_mag, cfg.lambda_mag));
        const double lm = l_mag.item();
        if (step == 0) res.initial_mag = lm;
        if (!std::isfinite(loss.item()))
            throw std::runtime_error("pretrain_critic: diverged at step " + std::to_string(step));
        tape.backward(loss);
        detail::set_requires_grad(t_params, true);
        opt.step(params);
        detail::zero_grads(params);
        if (step + 1 == cfg.pretrain_steps) {
            res.final_mag = lm;
            res.final_smooth = l_smooth.item();
            res.final_transport = l_transport.item();
        }
    }
    return res;
}

struct TrainResult {
    std::size_t steps_run = 0;
    double final_critic_loss = 0.0;
    double final_transport_loss = 0.0;
    std::size_t nan_recoveries = 0;
    std::vector<std::pair<std::string, double>> final_eval;
    PretrainResult transport_pretrain;
    CriticPretrainResult critic_pretrain;
};

using EvalHook = std::function<std::vector<std::pair<std::string, double>>(Model&)>;

// Alternating minimax optimization (one critic update, K_T transport
// updates per outer step; conditions resampled independently for every
// update). Writes log.csv / checkpoints / report.json into run_dir when one
// is given. On a non-finite loss the last snapshot is restored and both
// learning rates are halved once; a second occurrence aborts.
inline TrainResult train_minimax(Model& model, const TrainingTask& task, const TrainConfig& cfg,
                                 const std::filesystem::path& run_dir = {},
                                 const EvalHook& eval_hook = {}) {
    Rng root(cfg.seed);
    Rng pre_rng = root.split(10);
    Rng loop_rng = root.split(11);

    TrainResult res;
    if (cfg.pretrain && cfg.pretrain_steps > 0) {
        res.transport_pretrain = pretrain_transport(model, task, cfg, pre_rng);
        res.critic_pretrain = pretrain_critic(model, task, cfg, pre_rng);
    }

    auto t_params = model.transport_params();
    auto f_params = model.critic_params();
    AdamW t_opt({.lr = cfg.lr_transport, .weight_decay = cfg.wd_transport,
                 .clip_norm = cfg.clip_norm});
    AdamW f_opt({.lr = cfg.lr_critic, .weight_decay = cfg.wd_critic, .clip_norm = cfg.clip_norm});

    std::ofstream log;
    std::vector<std::string> eval_names;
    const bool with_files = !run_dir.empty();
    if (with_files) {
        std::filesystem::create_directories(run_dir / "checkpoints");
        log.open(run_dir / "log.csv", std::ios::trunc);
        log << "step,critic_loss,transport_loss,grad_norm_f,grad_norm_t";
        if (eval_hook) {
            auto probe = eval_hook(model);
            for (auto& [name, _] : probe) {
                eval_names.push_back(name);
                log << "," << name;
            }
        }
        log << "\n";
    }

    // snapshot for NaN recovery
    struct Snapshot {
        std::vector<Buffer> values;
        AdamW::State t_state, f_state;
    };
    auto all_params = model.all_params();
    auto take_snapshot = [&] {
        Snapshot s;
        for (auto* p : all_params) s.values.push_back(p->values());
        s.t_state = t_opt.state();
        s.f_state = f_opt.state();
        return s;
    };
    auto restore_snapshot = [&](const Snapshot& s) {
        for (std::size_t i = 0; i < all_params.size(); ++i) all_params[i]->values() = s.values[i];
        t_opt.restore(s.t_state);
        f_opt.restore(s.f_state);
    };
    Snapshot snapshot = take_snapshot();
    bool lr_halved = false;

    char buf[64];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };

    double critic_loss_value = 0.0, transport_loss_value = 0.0;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        // ---- critic update ----
        auto c_f = sample_condition(task.cond_spec, loop_rng);
        Matrix xb = task.sample_source(cfg.batch_x, loop_rng);
        Matrix yb = task.sample_target(cfg.batch_y, c_f, loop_rng);
        Matrix x_rep = detail::repeat_rows(xb, cfg.batch_z);
        Tensor z = sample_noise(x_rep.rows, model.arch.noise_dim, loop_rng);

        Tensor transported;
        {
            Tape fwd(false); // T is constant during the critic update
            transported = model.transport_forward(fwd, batch_tensor(x_rep), z, c_f);
        }
        {
            Tape tape;
            Tensor ft = tape.mean(model.critic_forward(tape, transported.detached(), c_f));
            Tensor fy = tape.mean(model.critic_forward(tape, batch_tensor(yb), c_f));
            // ascending E f(y) - E f(T) == descending this quantity
            Tensor critic_loss = tape.sub(ft, fy);
            if (!cfg.critic_ascent) critic_loss = tape.mul_scalar(critic_loss, -1.0);
            critic_loss_value = critic_loss.item();
            if (!std::isfinite(critic_loss_value)) {
                if (lr_halved)
                    throw std::runtime_error("train_minimax: non-finite critic loss after lr "
                                             "halving, aborting at step " +
                                             std::to_string(step));
                restore_snapshot(snapshot);
                t_opt.set_lr(t_opt.config().lr * 0.5);
                f_opt.set_lr(f_opt.config().lr * 0.5);
                lr_halved = true;
                ++res.nan_recoveries;
                continue;
            }
            tape.backward(critic_loss);
            f_opt.step(f_params);
            detail::zero_grads(f_params);
        }

        // ---- K_T transport updates ----
        for (std::size_t k = 0; k < cfg.k_transport; ++k) {
            auto c_t = sample_condition(task.cond_spec, loop_rng);
            Matrix xtb = task.sample_source(cfg.batch_x, loop_rng);
            Matrix xt_rep = detail::repeat_rows(xtb, cfg.batch_z);
            Tensor zt = sample_noise(xt_rep.rows, model.arch.noise_dim, loop_rng);

            detail::set_requires_grad(f_params, false);
            Tape tape;
            Tensor x_t = batch_tensor(xt_rep);
            Tensor y_t = model.transport_forward(tape, x_t, zt, c_t);
            Tensor cost = tape.mean(tape.sq_l2(x_t, y_t));
            Tensor f_term = tape.mean(model.critic_forward(tape, y_t, c_t));
            Tensor transport_loss = tape.sub(cost, f_term);
            transport_loss_value = transport_loss.item();
            if (!std::isfinite(transport_loss_value)) {
                detail::set_requires_grad(f_params, true);
                if (lr_halved)
                    throw std::runtime_error("train_minimax: non-finite transport loss after lr "
                                             "halving, aborting at step " +
                                             std::to_string(step));
                restore_snapshot(snapshot);
                t_opt.set_lr(t_opt.config().lr * 0.5);
                f_opt.set_lr(f_opt.config().lr * 0.5);
                lr_halved = true;
                ++res.nan_recoveries;
                break;
            }
            tape.backward(transport_loss);
            detail::set_requires_grad(f_params, true);
            t_opt.step(t_params);
            detail::zero_grads(t_params);
        }

        if (with_files && (step % cfg.log_interval == 0 || step == cfg.steps)) {
            log << step << "," << fmt(critic_loss_value) << "," << fmt(transport_loss_value)
                << "," << fmt(f_opt.last_grad_norm()) << "," << fmt(t_opt.last_grad_norm());
            if (eval_hook && cfg.eval_interval > 0 &&
                (step % cfg.eval_interval == 0 || step == cfg.steps)) {
                auto metrics = eval_hook(model);
                for (auto& [_, v] : metrics) log << "," << fmt(v);
            } else {
                for (std::size_t i = 0; i < eval_names.size(); ++i) log << ",";
            }
            log << "\n";
        }

        if (step % cfg.checkpoint_interval == 0) {
            snapshot = take_snapshot();
            if (with_files)
                save_checkpoint(run_dir / "checkpoints" / ("step_" + std::to_string(step)),
                                model);
        }
        res.steps_run = step;
    }

    res.final_critic_loss = critic_loss_value;
    res.final_transport_loss = transport_loss_value;
    if (eval_hook) res.final_eval = eval_hook(model);

    if (with_files) {
        save_checkpoint(run_dir / "checkpoints" / "final", model);
        json report;
        report["steps_run"] = res.steps_run;
        report["final_critic_loss"] = res.final_critic_loss;
        report["final_transport_loss"] = res.final_transport_loss;
        report["nan_recoveries"] = res.nan_recoveries;
        json eval = json::object();
        for (auto& [name, v] : res.final_eval) eval[name] = v;
        report["final_eval"] = eval;
        if (cfg.pretrain) {
            report["pretrain"] = {{"transport_initial", res.transport_pretrain.initial_loss},
                                  {"transport_final", res.transport_pretrain.final_loss},
                                  {"critic_mag_initial", res.critic_pretrain.initial_mag},
                                  {"critic_mag_final", res.critic_pretrain.final_mag}};
        }
        write_report(run_dir / "report.json", report);
    }
    return res;
}

} // namespace cotmap
