#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "logitlens/probe.hpp"
#include "testutil.hpp"

using namespace logitlens;

namespace {

/// Two well-separated Gaussian clusters in d dimensions.
ProbeDataset separable_clusters(std::uint64_t seed, int n_per_class = 40, int d = 8) {
    Rng rng(seed);
    ProbeDataset ds;
    ds.n_classes = 2;
    ds.features = Mat(2 * n_per_class, d);
    for (int i = 0; i < 2 * n_per_class; ++i) {
        const int label = i < n_per_class ? 0 : 1;
        ds.labels.push_back(label);
        for (int j = 0; j < d; ++j) {
            const double center = j == 0 ? (label == 0 ? -3.0 : 3.0) : 0.0;
            ds.features(i, j) = static_cast<float>(center + 0.5 * normal01(rng));
        }
    }
    return ds;
}

}  // namespace

TEST_CASE("probe separates well-separated clusters") {
    const ProbeDataset ds = separable_clusters(11);
    const auto [probe, accuracy] = train_probe(ds, 1);
    CHECK(accuracy >= 0.95);
    CHECK(probe.weights.allFinite());
    CHECK(probe.bias.allFinite());
}

TEST_CASE("probe on shuffled labels stays near chance") {
    ProbeDataset ds = separable_clusters(13);
    Rng rng(17);
    shuffle(ds.labels, rng);  // destroy the signal, keep the class balance
    const auto [probe, accuracy] = train_probe(ds, 1);
    CHECK(accuracy >= 0.35);
    CHECK(accuracy <= 0.65);
}

TEST_CASE("probe training is deterministic under a fixed seed") {
    const ProbeDataset ds = separable_clusters(19);
    const auto [p1, a1] = train_probe(ds, 123);
    const auto [p2, a2] = train_probe(ds, 123);
    CHECK(a1 == a2);
    REQUIRE(p1.weights.size() == p2.weights.size());
    CHECK(std::memcmp(p1.weights.data(), p2.weights.data(),
                      sizeof(double) * p1.weights.size()) == 0);
    CHECK(std::memcmp(p1.bias.data(), p2.bias.data(), sizeof(double) * p1.bias.size()) ==
          0);

    // a different split seed is allowed to give different parameters
    const auto [p3, a3] = train_probe(ds, 124);
    (void)a3;
    CHECK(std::memcmp(p1.weights.data(), p3.weights.data(),
                      sizeof(double) * p1.weights.size()) != 0);
}

TEST_CASE("probe rejects degenerate inputs") {
    ProbeDataset ds = separable_clusters(23);
    SECTION("single class") {
        std::fill(ds.labels.begin(), ds.labels.end(), 0);
        ds.n_classes = 1;
        CHECK_THROWS_AS(train_probe(ds, 1), DegenerateLabelsError);
    }
    SECTION("too few examples") {
        ds.features = ds.features.topRows(6).eval();
        ds.labels.resize(6);
        CHECK_THROWS_AS(train_probe(ds, 1), InvalidInputError);
    }
    SECTION("label out of range") {
        ds.labels[0] = 5;
        CHECK_THROWS_AS(train_probe(ds, 1), IndexError);
    }
}

TEST_CASE("layer_accuracy_curves: structure and edge cases") {
    const auto& f = testutil::Fixture::get();
    auto dataset = load_qa_jsonl(testutil::fixture_path("qa/eval.jsonl"));
    dataset.resize(24);

    SECTION("empty layer list gives empty curves") {
        const auto curves =
            layer_accuracy_curves(*f.model, *f.tokenizer, dataset, {}, 1);
        CHECK(curves.empty());
    }

    SECTION("curves over several layers") {
        const std::vector<int> layers = {0, 6, f.config.n_layers};
        ProbeTrainConfig tc;
        tc.epochs = 200;  // enough for the comparison; keeps the test fast
        const auto curves =
            layer_accuracy_curves(*f.model, *f.tokenizer, dataset, layers, 1, {}, tc);
        REQUIRE(curves.size() == layers.size());
        for (std::size_t i = 0; i < curves.size(); ++i) {
            CHECK(curves[i].layer == layers[i]);
            CHECK(curves[i].probe_accuracy >= 0.0);
            CHECK(curves[i].probe_accuracy <= 1.0);
            CHECK(curves[i].lens_accuracy >= 0.0);
            CHECK(curves[i].lens_accuracy <= 1.0);
            CHECK(curves[i].lens_accuracy_unrestricted >= 0.0);
            CHECK(curves[i].lens_accuracy_unrestricted <= 1.0);
        }
    }
}

TEST_CASE("final-layer lens accuracy equals a direct computation") {
    const auto& f = testutil::Fixture::get();
    auto dataset = load_qa_jsonl(testutil::fixture_path("qa/eval.jsonl"));
    dataset.resize(16);
    const int top = f.config.n_layers;

    const HiddenStateDataset ds =
        collect_hidden_states(*f.model, *f.tokenizer, dataset, {top});
    ProbeTrainConfig tc;
    tc.epochs = 50;
    const auto curves = layer_accuracy_curves(*f.model, ds, 1, tc);
    REQUIRE(curves.size() == 1);

    // direct recomputation: run each prompt, decode the final layer, restrict
    // the argmax to the candidate set
    int hits = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        Rng rng(derive_seed(0, 0, dataset[i].id));
        const std::string prompt = build_prompt(dataset[i], 1, 0, rng);
        const auto ids = f.tokenizer->encode(prompt);
        const HiddenStateTrace trace = forward_with_taps(*f.model, ids);
        const Vec logits =
            lens_logits(*f.model, trace, top, static_cast<int>(ids.size()) - 1);
        TokenId best = ds.candidate_tokens[0];
        for (const TokenId c : ds.candidate_tokens) {
            if (logits[c] > logits[best]) best = c;
        }
        hits += best == gold_first_token(dataset[i], *f.tokenizer) ? 1 : 0;
    }
    CHECK(curves[0].lens_accuracy ==
          Catch::Approx(static_cast<double>(hits) / dataset.size()).margin(1e-12));
}

TEST_CASE("hidden-state persistence round trip") {
    const auto& f = testutil::Fixture::get();
    auto dataset = load_qa_jsonl(testutil::fixture_path("qa/eval.jsonl"));
    dataset.resize(16);
    const std::vector<int> layers = {0, 3, f.config.n_layers};

    const HiddenStateDataset live =
        collect_hidden_states(*f.model, *f.tokenizer, dataset, layers);
    const auto dir = std::filesystem::temp_directory_path();
    const std::string tensors = (dir / "probe_hidden.safetensors").string();
    const std::string sidecar = (dir / "probe_hidden.json").string();
    save_hidden_states(tensors, sidecar, live);
    const HiddenStateDataset loaded = load_hidden_states(tensors, sidecar);

    REQUIRE(loaded.layers == live.layers);
    REQUIRE(loaded.labels == live.labels);
    REQUIRE(loaded.candidate_tokens == live.candidate_tokens);
    REQUIRE(loaded.instance_ids == live.instance_ids);
    for (std::size_t li = 0; li < layers.size(); ++li) {
        REQUIRE(loaded.features[li] == live.features[li]);
    }

    ProbeTrainConfig tc;
    tc.epochs = 80;
    const auto from_live = layer_accuracy_curves(*f.model, live, 7, tc);
    const auto from_disk = layer_accuracy_curves(*f.model, loaded, 7, tc);
    REQUIRE(from_live.size() == from_disk.size());
    for (std::size_t i = 0; i < from_live.size(); ++i) {
        CHECK(from_live[i].probe_accuracy == from_disk[i].probe_accuracy);
        CHECK(from_live[i].lens_accuracy == from_disk[i].lens_accuracy);
        CHECK(from_live[i].lens_accuracy_unrestricted ==
              from_disk[i].lens_accuracy_unrestricted);
    }
}
