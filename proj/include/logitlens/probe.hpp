#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "logitlens/errors.hpp"
#include "logitlens/lens.hpp"
#include "logitlens/model.hpp"
#include "logitlens/qa.hpp"
#include "logitlens/rng.hpp"
#include "logitlens/safetensors.hpp"
#include "logitlens/tensor.hpp"

namespace logitlens {

// Linear probing of hidden states, and the probe-vs-lens comparison: train a
// multinomial logistic regression per layer to predict the answer's first
// token (over a closed candidate set built from the dataset) and put its
// accuracy next to the lens top-1 accuracy at the same layer.

struct ProbeDataset {
    Mat features;             // n_examples x d
    std::vector<int> labels;  // class indices in [0, n_classes)
    int n_classes = 0;
    int layer = -1;

    void validate() const {
        if (features.rows() != static_cast<Eigen::Index>(labels.size())) {
            throw ShapeMismatchError("probe dataset: feature rows != label count");
        }
        if (n_classes < 2) throw DegenerateLabelsError("probe dataset has < 2 classes");
        for (const int y : labels) {
            if (y < 0 || y >= n_classes) throw IndexError("probe label out of range");
        }
    }
};

struct ProbeTrainConfig {
    double learning_rate = 0.1;
    double l2_penalty = 1e-3;
    int epochs = 500;
    double holdout_fraction = 0.2;
};

struct ProbeModel {
    Eigen::MatrixXd weights;  // n_classes x d
    Eigen::VectorXd bias;     // n_classes
    ProbeTrainConfig train_config;
    std::uint64_t split_seed = 0;

    int predict(const Eigen::VectorXd& x) const {
        const Eigen::VectorXd scores = weights * x + bias;
        int best = 0;
        for (int c = 1; c < scores.size(); ++c) {
            if (scores[c] > scores[best]) best = c;
        }
        return best;
    }
};

namespace detail {

/// Per-class seeded shuffle, last fraction to the held-out split.
inline void stratified_split(const std::vector<int>& labels, int n_classes,
                             double holdout_fraction, Rng& rng,
                             std::vector<int>& train_idx, std::vector<int>& held_idx) {
    std::vector<std::vector<int>> by_class(n_classes);
    for (int i = 0; i < static_cast<int>(labels.size()); ++i) {
        by_class[labels[i]].push_back(i);
    }
    for (auto& idx : by_class) {
        shuffle(idx, rng);
        const auto n_held = static_cast<std::size_t>(
            std::floor(holdout_fraction * static_cast<double>(idx.size())));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            (i < idx.size() - n_held ? train_idx : held_idx).push_back(idx[i]);
        }
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(held_idx.begin(), held_idx.end());
}

}  // namespace detail

/// Full-batch gradient descent on the softmax cross-entropy with L2 penalty,
/// to a fixed epoch budget; deterministic under the split seed. Returns the
/// trained probe and its accuracy on the stratified 20% held-out split.
inline std::pair<ProbeModel, double> train_probe(const ProbeDataset& data,
                                                 std::uint64_t split_seed,
                                                 const ProbeTrainConfig& config = {}) {
    data.validate();
    const int n = static_cast<int>(data.features.rows());
    const int d = static_cast<int>(data.features.cols());
    if (n < 10) throw InvalidInputError("probe training needs >= 10 examples");

    Rng rng(split_seed);
    std::vector<int> train_idx, held_idx;
    detail::stratified_split(data.labels, data.n_classes, config.holdout_fraction, rng,
                             train_idx, held_idx);
    std::vector<bool> train_has_class(data.n_classes, false);
    for (const int i : train_idx) train_has_class[data.labels[i]] = true;
    if (std::count(train_has_class.begin(), train_has_class.end(), true) < 2) {
        throw DegenerateLabelsError("training split has < 2 classes");
    }

    const int nt = static_cast<int>(train_idx.size());
    Eigen::MatrixXd x(nt, d);
    std::vector<int> y(nt);
    for (int i = 0; i < nt; ++i) {
        x.row(i) = data.features.row(train_idx[i]).cast<double>();
        y[i] = data.labels[train_idx[i]];
    }

    ProbeModel probe;
    probe.train_config = config;
    probe.split_seed = split_seed;
    probe.weights = Eigen::MatrixXd::Zero(data.n_classes, d);
    probe.bias = Eigen::VectorXd::Zero(data.n_classes);

    Eigen::MatrixXd scores(nt, data.n_classes);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        scores.noalias() = x * probe.weights.transpose();
        scores.rowwise() += probe.bias.transpose();
        // row-wise softmax minus one-hot targets, in place
        for (int i = 0; i < nt; ++i) {
            const double m = scores.row(i).maxCoeff();
            double z = 0.0;
            for (int c = 0; c < data.n_classes; ++c) z += std::exp(scores(i, c) - m);
            for (int c = 0; c < data.n_classes; ++c) {
                scores(i, c) = std::exp(scores(i, c) - m) / z;
            }
            scores(i, y[i]) -= 1.0;
        }
        const Eigen::MatrixXd grad_w =
            scores.transpose() * x / nt + config.l2_penalty * probe.weights;
        const Eigen::VectorXd grad_b = scores.colwise().mean().transpose();
        probe.weights -= config.learning_rate * grad_w;
        probe.bias -= config.learning_rate * grad_b;
    }

    int correct = 0;
    for (const int i : held_idx) {
        if (probe.predict(data.features.row(i).cast<double>().transpose()) == data.labels[i]) {
            ++correct;
        }
    }
    const double accuracy =
        held_idx.empty() ? 0.0 : static_cast<double>(correct) / held_idx.size();
    return {std::move(probe), accuracy};
}

/// How the per-instance hidden states for probing are produced: one prompt
/// per instance (k documents, fixed gold position), hidden state taken at the
/// last prompt position.
struct ProbePromptOptions {
    int k_documents = 1;
    int gold_position = 0;
    std::uint64_t seed = 0;
    PromptTemplate prompt;
};

/// Hidden states for a set of instances at selected layers, plus the class
/// labeling over the closed candidate-token set.
struct HiddenStateDataset {
    std::vector<int> layers;
    std::vector<Mat> features;              // aligned with layers; n x d each
    std::vector<int> labels;                // class index per example
    std::vector<TokenId> candidate_tokens;  // class -> token id (sorted)
    std::vector<std::string> instance_ids;
};

inline HiddenStateDataset collect_hidden_states(const Model& model,
                                                const Tokenizer& tokenizer,
                                                const std::vector<QAInstance>& instances,
                                                const std::vector<int>& layers,
                                                const ProbePromptOptions& opts = {}) {
    if (instances.empty()) throw EmptyInputError("no instances");
    for (const int l : layers) {
        if (l < 0 || l > model.config().n_layers) {
            throw IndexError("layer " + std::to_string(l) + " outside [0, " +
                             std::to_string(model.config().n_layers) + "]");
        }
    }
    HiddenStateDataset ds;
    ds.layers = layers;

    std::vector<TokenId> golds;
    golds.reserve(instances.size());
    for (const QAInstance& inst : instances) {
        golds.push_back(gold_first_token(inst, tokenizer));
    }
    ds.candidate_tokens = golds;
    std::sort(ds.candidate_tokens.begin(), ds.candidate_tokens.end());
    ds.candidate_tokens.erase(
        std::unique(ds.candidate_tokens.begin(), ds.candidate_tokens.end()),
        ds.candidate_tokens.end());

    const int n = static_cast<int>(instances.size());
    const int d = model.config().d_model;
    ds.features.assign(layers.size(), Mat(n, d));
    ds.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        const QAInstance& inst = instances[i];
        Rng rng(derive_seed(opts.seed, 0, inst.id));
        const std::string prompt =
            build_prompt(inst, opts.k_documents, opts.gold_position, rng, opts.prompt);
        const std::vector<TokenId> ids = tokenizer.encode(prompt);
        const HiddenStateTrace trace = forward_with_taps(model, ids);
        const int last = static_cast<int>(ids.size()) - 1;
        for (std::size_t li = 0; li < layers.size(); ++li) {
            ds.features[li].row(i) = trace.states[layers[li]].row(last);
        }
        const auto it = std::lower_bound(ds.candidate_tokens.begin(),
                                         ds.candidate_tokens.end(), golds[i]);
        ds.labels[i] = static_cast<int>(it - ds.candidate_tokens.begin());
        ds.instance_ids.push_back(inst.id);
    }
    return ds;
}

struct LayerAccuracy {
    int layer = 0;
    double probe_accuracy = 0.0;
    double lens_accuracy = 0.0;              // top-1 restricted to candidates
    double lens_accuracy_unrestricted = 0.0; // top-1 over the full vocabulary
};

/// Probe-vs-lens curves from already-collected hidden states. The lens side
/// decodes each stored state through the model head and scores its top-1 both
/// restricted to the candidate set and unrestricted.
inline std::vector<LayerAccuracy> layer_accuracy_curves(
    const Model& model, const HiddenStateDataset& ds, std::uint64_t split_seed,
    const ProbeTrainConfig& train_config = {}) {
    std::vector<LayerAccuracy> out;
    const int n = static_cast<int>(ds.labels.size());
    for (std::size_t li = 0; li < ds.layers.size(); ++li) {
        ProbeDataset pd;
        pd.features = ds.features[li];
        pd.labels = ds.labels;
        pd.n_classes = static_cast<int>(ds.candidate_tokens.size());
        pd.layer = ds.layers[li];

        LayerAccuracy la;
        la.layer = ds.layers[li];
        la.probe_accuracy = train_probe(pd, split_seed, train_config).second;

        int restricted = 0, unrestricted = 0;
        for (int i = 0; i < n; ++i) {
            const Vec logits = model.unembed(ds.features[li].row(i).data());
            const TokenId gold = ds.candidate_tokens[ds.labels[i]];
            TokenId best_cand = ds.candidate_tokens[0];
            for (const TokenId c : ds.candidate_tokens) {
                if (logits[c] > logits[best_cand]) best_cand = c;  // ids pre-sorted
            }
            restricted += best_cand == gold ? 1 : 0;
            unrestricted += top1_token(lens_distribution(logits)) == gold ? 1 : 0;
        }
        la.lens_accuracy = static_cast<double>(restricted) / n;
        la.lens_accuracy_unrestricted = static_cast<double>(unrestricted) / n;
        out.push_back(la);
    }
    return out;
}

/// Convenience overload: collect hidden states, then compute both curves.
inline std::vector<LayerAccuracy> layer_accuracy_curves(
    const Model& model, const Tokenizer& tokenizer,
    const std::vector<QAInstance>& instances, const std::vector<int>& layers,
    std::uint64_t split_seed, const ProbePromptOptions& opts = {},
    const ProbeTrainConfig& train_config = {}) {
    if (layers.empty()) return {};
    const HiddenStateDataset ds =
        collect_hidden_states(model, tokenizer, instances, layers, opts);
    return layer_accuracy_curves(model, ds, split_seed, train_config);
}

/// Persist hidden states as a named-tensor container ("layer_<l>" matrices)
/// with a JSON sidecar carrying labels, candidate tokens and instance ids.
inline void save_hidden_states(const std::string& tensor_path,
                               const std::string& sidecar_path,
                               const HiddenStateDataset& ds) {
    NamedTensorMap tensors;
    for (std::size_t li = 0; li < ds.layers.size(); ++li) {
        NamedTensor t;
        const Mat& m = ds.features[li];
        t.shape = {m.rows(), m.cols()};
        t.data.assign(m.data(), m.data() + m.size());
        tensors["layer_" + std::to_string(ds.layers[li])] = std::move(t);
    }
    write_safetensors(tensor_path, tensors);

    nlohmann::json sidecar;
    sidecar["schema"] = "logitlens.hidden_states/1";
    sidecar["layers"] = ds.layers;
    sidecar["labels"] = ds.labels;
    sidecar["candidate_tokens"] = ds.candidate_tokens;
    sidecar["instance_ids"] = ds.instance_ids;
    std::ofstream out(sidecar_path, std::ios::trunc);
    if (!out) throw LoadError("cannot write sidecar: " + sidecar_path);
    out << sidecar.dump(1) << "\n";
}

inline HiddenStateDataset load_hidden_states(const std::string& tensor_path,
                                             const std::string& sidecar_path) {
    std::ifstream in(sidecar_path);
    if (!in) throw LoadError("cannot open sidecar: " + sidecar_path);
    nlohmann::json sidecar;
    try {
        in >> sidecar;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("bad sidecar JSON: " + std::string(e.what()));
    }
    HiddenStateDataset ds;
    ds.layers = sidecar.at("layers").get<std::vector<int>>();
    ds.labels = sidecar.at("labels").get<std::vector<int>>();
    ds.candidate_tokens = sidecar.at("candidate_tokens").get<std::vector<TokenId>>();
    ds.instance_ids = sidecar.at("instance_ids").get<std::vector<std::string>>();

    const NamedTensorMap tensors = read_safetensors(tensor_path);
    for (const int l : ds.layers) {
        const std::string name = "layer_" + std::to_string(l);
        const auto it = tensors.find(name);
        if (it == tensors.end()) throw MissingTensorError(name);
        const NamedTensor& t = it->second;
        if (t.shape.size() != 2 ||
            t.shape[0] != static_cast<std::int64_t>(ds.labels.size())) {
            throw ShapeMismatchError("tensor " + name + " rows != label count");
        }
        ds.features.push_back(
            Eigen::Map<const Mat>(t.data.data(), t.shape[0], t.shape[1]));
    }
    return ds;
}

}  // namespace logitlens
