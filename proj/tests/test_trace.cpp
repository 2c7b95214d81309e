#include <doctest.h>

#include <sstream>

#include "stepleak/rng.hpp"
#include "stepleak/trace.hpp"

using namespace stepleak;

namespace {

ModelSpec make_model(std::uint64_t seed, std::vector<LayerSpec> layers) {
    ModelSpec m;
    m.seed = seed;
    m.layers = std::move(layers);
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        Rng rng = substream(seed, "trace-test-model", k);
        std::vector<float> w(static_cast<std::size_t>(m.layers[k].n_inputs) * m.layers[k].n_neurons);
        std::vector<float> b(m.layers[k].n_neurons);
        for (auto& v : w) v = static_cast<float>(rng.normal(0.0, 0.3));
        for (auto& v : b) v = static_cast<float>(rng.normal(0.0, 0.3));
        m.weights.push_back(std::move(w));
        m.biases.push_back(std::move(b));
    }
    return m;
}

std::vector<float> random_input(const ModelSpec& m, Rng& rng, double mag = 10.0) {
    std::vector<float> x(m.n_inputs());
    for (auto& v : x) v = static_cast<float>(rng.uniform(-mag, mag));
    return x;
}

}  // namespace

TEST_CASE("a 16-neuron exponential layer alternates framework and libm runs") {
    const ModelSpec m = make_model(3, {{2, 16, make_activation(Activation::exponential)}});
    const InferResult r = infer(m, std::vector<float>{0.5f, -0.5f});
    const PageLayout layout;
    const TraceLog t = emit_trace(r.log, layout);

    REQUIRE(t.runs.size() == 2 + 32);  // two markers around 16 fw/libm pairs
    CHECK(t.runs.front().page == layout.dispatch_page);
    CHECK(t.runs.front().count == layout.layer_marker_count);
    CHECK(t.runs.back().page == layout.dispatch_page);
    CHECK(t.runs.back().count == layout.layer_marker_count);
    for (int n = 0; n < 16; ++n) {
        CHECK(t.runs[1 + 2 * n].page == layout.framework_page);
        CHECK(t.runs[2 + 2 * n].page == layout.libm_page);
    }
}

TEST_CASE("saturated sigmoid neurons emit no libm run") {
    // neuron 0 saturates (sigma=100), neuron 1 takes the standard branch
    ModelSpec m;
    m.layers = {{1, 2, make_activation(Activation::sigmoid)}};
    m.weights = {{100.0f, -1.0f}};
    m.biases = {{0.0f, 0.0f}};
    const InferResult r = infer(m, std::vector<float>{1.0f});
    const PageLayout layout;
    const TraceLog t = emit_trace(r.log, layout);

    // marker, fw(sat), glue, fw(std), libm, marker
    REQUIRE(t.runs.size() == 6);
    CHECK(t.runs[1].page == layout.framework_page);
    CHECK(t.runs[2].page == layout.dispatch_page);
    CHECK(t.runs[2].count == layout.glue_count);
    CHECK(t.runs[3].page == layout.framework_page);
    CHECK(t.runs[4].page == layout.libm_page);

    const ParsedTrace parsed = parse_trace(t, layout, m.layers);
    CHECK(parsed_matches_log(parsed, r.log));
}

TEST_CASE("empty log gives an empty trace") {
    CHECK(emit_trace(LeakLog{}, PageLayout{}).runs.empty());
}

TEST_CASE("maximal runs: consecutive runs always change page") {
    Rng rng(17);
    const ModelSpec m = make_model(4, {{3, 5, make_activation(Activation::sigmoid)},
                                       {5, 4, make_activation(Activation::relu)},
                                       {4, 2, make_activation(Activation::tanh)}});
    for (int i = 0; i < 20; ++i) {
        const InferResult r = infer(m, random_input(m, rng, 50.0));
        const TraceLog t = emit_trace(r.log, PageLayout{});
        for (std::size_t j = 1; j < t.runs.size(); ++j) {
            CHECK(t.runs[j].page != t.runs[j - 1].page);
        }
    }
}

TEST_CASE("round trip across activation mixes and random inputs") {
    Rng rng(23);
    const std::vector<ModelSpec> models = {
        make_model(5, {{2, 3, make_activation(Activation::exponential)}}),
        make_model(6, {{3, 4, make_activation(Activation::sigmoid)},
                       {4, 2, make_activation(Activation::sigmoid)}}),
        make_model(7, {{2, 2, make_activation(Activation::tanh)}}),
        make_model(8, {{4, 6, make_activation(Activation::relu, /*branchy=*/true)}}),
        make_model(9, {{3, 3, make_activation(Activation::relu)}}),
        make_model(10, {{2, 4, make_activation(Activation::sigmoid)},
                        {4, 8, make_activation(Activation::sigmoid)},
                        {8, 1, make_activation(Activation::relu)}}),
    };
    const PageLayout layout;
    for (const ModelSpec& m : models) {
        for (int i = 0; i < 30; ++i) {
            const InferResult r = infer(m, random_input(m, rng, 120.0));
            const TraceLog t = emit_trace(r.log, layout);
            const ParsedTrace parsed = parse_trace(t, layout, m.layers);
            CHECK(parsed_matches_log(parsed, r.log));
        }
    }
}

TEST_CASE("preset models round trip through the trace channel") {
    Rng rng(29);
    const PageLayout layout;
    for (const char* name : {"insurance", "mult"}) {
        const ModelSpec m = preset_model(name, 2);
        for (int i = 0; i < 5; ++i) {
            const InferResult r = infer(m, random_input(m, rng, 200.0));
            const ParsedTrace parsed = parse_trace(emit_trace(r.log, layout), layout, m.layers);
            CHECK(parsed_matches_log(parsed, r.log));
        }
    }
    const ModelSpec mnist = preset_model("mnist", 2);
    const InferResult r = infer(mnist, random_input(mnist, rng, 200.0));
    CHECK(parsed_matches_log(parse_trace(emit_trace(r.log, layout), layout, mnist.layers), r.log));
}

TEST_CASE("fusion offset shifts every run count deterministically") {
    const ModelSpec m = make_model(11, {{2, 3, make_activation(Activation::exponential)}});
    PageLayout plain;
    PageLayout fused;
    fused.fusion_offset = 1;

    const InferResult r = infer(m, std::vector<float>{1.0f, -2.0f});
    const TraceLog t_plain = emit_trace(r.log, plain);
    const TraceLog t_fused = emit_trace(r.log, fused);
    REQUIRE(t_plain.runs.size() == t_fused.runs.size());
    for (std::size_t i = 0; i < t_plain.runs.size(); ++i) {
        CHECK(t_fused.runs[i].count == t_plain.runs[i].count + 1);
    }

    CHECK(parsed_matches_log(parse_trace(t_fused, fused, m.layers), r.log));
    // parsing with the wrong toggle must fail, not mis-parse
    CHECK_THROWS_AS(parse_trace(t_fused, plain, m.layers), TraceError);
}

TEST_CASE("trace file io round trips") {
    const ModelSpec m = make_model(12, {{2, 2, make_activation(Activation::sigmoid)}});
    const InferResult r = infer(m, std::vector<float>{0.1f, 0.2f});
    const TraceLog t = emit_trace(r.log, PageLayout{});
    std::stringstream ss;
    write_trace(t, ss);
    CHECK(read_trace(ss) == t);

    std::istringstream bad("X 25000 4\n");
    CHECK_THROWS_AS(read_trace(bad), TraceError);
}

TEST_CASE("an overflow count on the libm page reads back as Overflow") {
    const ModelSpec m = make_model(13, {{1, 1, make_activation(Activation::exponential)}});
    // saturate the single neuron so its libm run carries the overflow count
    const float w = m.weights[0][0];
    const float drive = w != 0.0f ? 1000.0f / w : 1000.0f;
    const InferResult r = infer(m, std::vector<float>{drive});
    const TraceLog t = emit_trace(r.log, PageLayout{});
    bool saw_overflow_run = false;
    for (const TraceRun& run : t.runs) {
        if (run.page == PageLayout{}.libm_page && run.count == 17) saw_overflow_run = true;
    }
    CHECK(saw_overflow_run);
    const ParsedTrace parsed = parse_trace(t, PageLayout{}, m.layers);
    CHECK(parsed.layers[0][0][0].label == "Overflow");
}

TEST_CASE("truncated traces are rejected for every truncation length") {
    const ModelSpec m = make_model(14, {{2, 3, make_activation(Activation::sigmoid)},
                                        {3, 2, make_activation(Activation::relu)}});
    const InferResult r = infer(m, std::vector<float>{0.4f, -0.2f});
    const TraceLog t = emit_trace(r.log, PageLayout{});
    for (std::size_t k = 1; k <= t.runs.size(); ++k) {
        TraceLog cut = t;
        cut.runs.resize(t.runs.size() - k);
        CHECK_THROWS_AS(parse_trace(cut, PageLayout{}, m.layers), TraceError);
    }
}

TEST_CASE("rejection soundness under seeded corruption") {
    Rng rng(31);
    const std::vector<ModelSpec> models = {
        make_model(15, {{2, 4, make_activation(Activation::sigmoid)},
                        {4, 2, make_activation(Activation::relu)}}),
        make_model(16, {{3, 3, make_activation(Activation::exponential)}}),
        make_model(17, {{2, 2, make_activation(Activation::tanh)}}),
    };
    const PageLayout layout;
    int rejected = 0, identical = 0;
    for (const ModelSpec& m : models) {
        for (int i = 0; i < 40; ++i) {
            const InferResult r = infer(m, random_input(m, rng, 80.0));
            const TraceLog t = emit_trace(r.log, layout);
            for (CorruptMode mode :
                 {CorruptMode::truncate, CorruptMode::drop_run, CorruptMode::perturb_count}) {
                const TraceLog bad = corrupt_trace(t, mode, rng.next_u64());
                try {
                    const ParsedTrace parsed = parse_trace(bad, layout, m.layers);
                    CHECK(parsed_matches_log(parsed, r.log));  // never silently wrong
                    ++identical;
                } catch (const TraceError&) {
                    ++rejected;
                }
            }
        }
    }
    CHECK(rejected > 0);
    // all corrupted traces either rejected or parsed identically (CHECKs above)
    CHECK(rejected + identical == 3 * 40 * 3);
}

TEST_CASE("dropping one neuron's runs is a neuron-count mismatch") {
    const ModelSpec m = make_model(18, {{2, 4, make_activation(Activation::exponential)}});
    const InferResult r = infer(m, std::vector<float>{0.2f, 0.3f});
    TraceLog t = emit_trace(r.log, PageLayout{});
    // drop the second neuron's fw+libm pair
    t.runs.erase(t.runs.begin() + 3, t.runs.begin() + 5);
    CHECK_THROWS_AS(parse_trace(t, PageLayout{}, m.layers), IncompleteTrace);
}

TEST_CASE("a perturbed layer marker is rejected") {
    const ModelSpec m = make_model(19, {{2, 2, make_activation(Activation::exponential)}});
    const InferResult r = infer(m, std::vector<float>{0.2f, 0.3f});
    TraceLog t = emit_trace(r.log, PageLayout{});
    t.runs.front().count = 19;
    CHECK_THROWS_AS(parse_trace(t, PageLayout{}, m.layers), IncompleteTrace);
}
