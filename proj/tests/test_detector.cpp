#include <cmath>
#include <vector>

#include "confguard/detector.hpp"
#include "confguard/errors.hpp"
#include "confguard/rng.hpp"

#include "doctest.h"
#include "test_support.hpp"

using namespace confguard;
using testsupport::ev;
using testsupport::probs_to_events;

namespace {

DetectorConfig cfg(double p, std::uint32_t l, std::uint32_t n,
                   Variant variant = Variant::TopOneRun) {
    DetectorConfig config;
    config.prob_threshold = p;
    config.length_threshold = l;
    config.max_new_tokens = n;
    config.variant = variant;
    return config;
}

} // namespace

TEST_CASE("config defaults and validation") {
    DetectorConfig config;
    CHECK(config.prob_threshold == 0.99);
    CHECK(config.length_threshold == 10);
    CHECK(config.max_new_tokens == 50);
    Detector detector(config);
    CHECK(detector.run_count() == 0);

    CHECK_NOTHROW(cfg(0.5, 1, 1).validate());
    CHECK_THROWS_AS(cfg(1.0, 10, 50).validate(), InvalidConfig);
    CHECK_THROWS_AS(cfg(0.0, 10, 50).validate(), InvalidConfig);
    CHECK_THROWS_AS(cfg(-0.5, 10, 50).validate(), InvalidConfig);
    CHECK_THROWS_AS(cfg(0.99, 0, 50).validate(), InvalidConfig);
    CHECK_THROWS_AS(cfg(0.99, 10, 0).validate(), InvalidConfig);
    CHECK_THROWS_AS(cfg(0.99, 51, 50).validate(), InvalidConfig);
    CHECK_THROWS_AS(Detector(cfg(1.0, 10, 50)), InvalidConfig);
}

TEST_CASE("ten consecutive high-confidence tokens fire at index 9") {
    Detector detector(cfg(0.99, 10, 50));
    for (std::uint64_t i = 0; i < 9; ++i) {
        const StepOutcome outcome = detector.step(ev(i, 0.995));
        CHECK_FALSE(outcome.final());
    }
    const StepOutcome outcome = detector.step(ev(9, 0.995));
    REQUIRE(outcome.final());
    CHECK(*outcome.verdict == Verdict::backdoor(9, 0));
    CHECK(detector.finished());
}

TEST_CASE("a sub-threshold token resets the run") {
    Detector detector(cfg(0.99, 10, 50));
    for (std::uint64_t i = 0; i < 9; ++i) {
        CHECK_FALSE(detector.step(ev(i, 0.995)).final());
    }
    CHECK_FALSE(detector.step(ev(9, 0.5)).final());
    CHECK(detector.run_count() == 0);
    const StepOutcome outcome = detector.step(ev(10, 0.9, /*eos=*/true));
    REQUIRE(outcome.final());
    CHECK(*outcome.verdict == Verdict::normal(NormalReason::Eos));
}

TEST_CASE("probability exactly P does not extend a run") {
    Detector detector(cfg(0.99, 2, 50));
    CHECK_FALSE(detector.step(ev(0, 0.995)).final());
    CHECK(detector.run_count() == 1);
    CHECK_FALSE(detector.step(ev(1, 0.99)).final());
    CHECK(detector.run_count() == 0);
}

TEST_CASE("fire takes precedence over EOS on the same token") {
    Detector detector(cfg(0.9, 3, 50));
    CHECK_FALSE(detector.step(ev(0, 0.95)).final());
    CHECK_FALSE(detector.step(ev(1, 0.95)).final());
    const StepOutcome outcome = detector.step(ev(2, 0.95, /*eos=*/true));
    REQUIRE(outcome.final());
    CHECK(outcome.verdict->is_backdoor());
    CHECK(*outcome.verdict == Verdict::backdoor(2, 0));
}

TEST_CASE("EOS takes precedence over budget on the same token") {
    Detector detector(cfg(0.99, 3, 3));
    CHECK_FALSE(detector.step(ev(0, 0.5)).final());
    CHECK_FALSE(detector.step(ev(1, 0.5)).final());
    const StepOutcome outcome = detector.step(ev(2, 0.5, /*eos=*/true));
    REQUIRE(outcome.final());
    CHECK(*outcome.verdict == Verdict::normal(NormalReason::Eos));
}

TEST_CASE("budget verdict after N tokens without EOS") {
    const std::vector<double> probs(50, 0.5);
    const Verdict verdict = run_stream(cfg(0.99, 10, 50), probs_to_events(probs));
    CHECK(verdict == Verdict::normal(NormalReason::Budget));
}

TEST_CASE("empty stream is Normal{Eos}") {
    const Verdict verdict = run_stream(cfg(0.99, 10, 50), {});
    CHECK(verdict == Verdict::normal(NormalReason::Eos));
}

TEST_CASE("stream ending before EOS and under budget is Normal{Eos}") {
    const std::vector<double> probs(5, 0.5);
    const Verdict verdict = run_stream(cfg(0.99, 10, 50), probs_to_events(probs));
    CHECK(verdict == Verdict::normal(NormalReason::Eos));
}

TEST_CASE("step on a finished detector throws StateFinished") {
    Detector detector(cfg(0.99, 10, 50));
    REQUIRE(detector.step(ev(0, 0.5, /*eos=*/true)).final());
    CHECK_THROWS_AS(detector.step(ev(1, 0.5)), StateFinished);
}

TEST_CASE("reset returns a detector to its freshly-constructed state") {
    SUBCASE("run variant") {
        Detector detector(cfg(0.9, 3, 20));
        CHECK_FALSE(detector.step(ev(0, 0.95)).final());
        CHECK_FALSE(detector.step(ev(1, 0.95)).final());
        REQUIRE(detector.step(ev(2, 0.95)).final());
        REQUIRE(detector.finished());

        detector.reset();
        CHECK_FALSE(detector.finished());
        CHECK(detector.run_count() == 0);
        CHECK(detector.tokens_seen() == 0);
        // The next stream restarts at index 0 and is judged on its own.
        CHECK_FALSE(detector.step(ev(0, 0.95)).final());
        const StepOutcome outcome = detector.step(ev(1, 0.5, /*eos=*/true));
        REQUIRE(outcome.final());
        CHECK(*outcome.verdict == Verdict::normal(NormalReason::Eos));
    }

    SUBCASE("windowed variant carries nothing across reset") {
        Detector detector(cfg(0.9, 3, 20, Variant::WindowedPpl));
        CHECK_FALSE(detector.step(ev(0, 0.99)).final());
        CHECK_FALSE(detector.step(ev(1, 0.99)).final());
        detector.reset();
        // Strong tokens from before the reset must not count toward the new
        // stream's window: it has to refill from scratch.
        CHECK_FALSE(detector.step(ev(0, 0.99)).final());
        CHECK_FALSE(detector.step(ev(1, 0.99)).final());
        const StepOutcome outcome = detector.step(ev(2, 0.99));
        REQUIRE(outcome.final());
        CHECK(*outcome.verdict == Verdict::backdoor(2, 0));
    }

    SUBCASE("windowed variant drops a pending zero on reset") {
        Detector detector(cfg(0.9, 3, 20, Variant::WindowedPpl));
        CHECK_FALSE(detector.step(ev(0, 0.0)).final());
        detector.reset();
        // The zero left the window; a full window of strong tokens must fire
        // rather than throw.
        CHECK_FALSE(detector.step(ev(0, 0.99)).final());
        CHECK_FALSE(detector.step(ev(1, 0.99)).final());
        CHECK(detector.step(ev(2, 0.99)).final());
    }
}

TEST_CASE("non-contiguous event index throws IndexGap") {
    Detector detector(cfg(0.99, 10, 50));
    CHECK_FALSE(detector.step(ev(0, 0.5)).final());
    CHECK_THROWS_AS(detector.step(ev(2, 0.5)), IndexGap);
    CHECK_THROWS_AS(Detector(cfg(0.99, 10, 50)).step(ev(3, 0.5)), IndexGap);
}

TEST_CASE("suffix events cannot change a Backdoor verdict") {
    confguard::Xoshiro256StarStar rng(2024);
    const DetectorConfig config = cfg(0.9, 3, 20);
    int fired_streams = 0;
    for (int trial = 0; trial < 500; ++trial) {
        auto events = testsupport::random_stream_for(rng, config);
        const Verdict base = run_stream(config, events);
        if (!base.is_backdoor()) {
            continue;
        }
        ++fired_streams;
        // Splice arbitrary garbage after the firing point; run_stream must
        // never look at it.
        auto extended = events;
        extended.resize(*base.fired_at + 1);
        for (std::uint64_t i = 0; i < 10; ++i) {
            extended.push_back(ev(extended.size(), rng.next_double(), i == 4));
        }
        CHECK(run_stream(config, extended) == base);
    }
    CHECK(fired_streams > 50);
}

TEST_CASE("early-stop minimality: no shorter prefix fires") {
    confguard::Xoshiro256StarStar rng(77);
    const DetectorConfig config = cfg(0.9, 4, 30);
    int fired_streams = 0;
    for (int trial = 0; trial < 300; ++trial) {
        auto events = testsupport::random_stream_for(rng, config);
        const Verdict base = run_stream(config, events);
        if (!base.is_backdoor()) {
            continue;
        }
        ++fired_streams;
        std::vector<TokenEvent> prefix(events.begin(),
                                       events.begin() + static_cast<long>(*base.fired_at));
        CHECK_FALSE(run_stream(config, prefix).is_backdoor());
    }
    CHECK(fired_streams > 30);
}

TEST_CASE("verdict depends only on comparison outcomes") {
    confguard::Xoshiro256StarStar rng(31337);
    const DetectorConfig config = cfg(0.95, 3, 25);
    for (int trial = 0; trial < 200; ++trial) {
        auto events = testsupport::random_stream_for(rng, config);
        auto perturbed = events;
        for (auto& event : perturbed) {
            // Squash each side of the threshold toward a fixed representative,
            // preserving every comparison outcome.
            event.top1_prob = event.top1_prob > config.prob_threshold ? 0.999 : 0.1;
        }
        CHECK(run_stream(config, events) == run_stream(config, perturbed));
    }
}

TEST_CASE("replaying the same stream twice gives identical verdicts") {
    confguard::Xoshiro256StarStar rng(5);
    const DetectorConfig config = cfg(0.9, 3, 20);
    for (int trial = 0; trial < 100; ++trial) {
        const auto events = testsupport::random_stream_for(rng, config);
        CHECK(run_stream(config, events) == run_stream(config, events));
    }
}

TEST_CASE("TopOneRun streaming verdict equals the full-scan oracle") {
    const DetectorConfig config = cfg(0.99, 3, 20);
    confguard::Xoshiro256StarStar rng(11);
    for (int trial = 0; trial < 10000; ++trial) {
        const auto events = testsupport::random_stream_for(rng, config);
        const Verdict expected = testsupport::naive_top1_verdict(config, events);
        CHECK(run_stream(config, events) == expected);
    }
}

TEST_CASE("TopOneRun state is one counter") {
    CHECK(sizeof(TopOneRunState) == sizeof(std::uint32_t));
}

// --- windowed-PPL variant ---------------------------------------------------

TEST_CASE("windowed: ten tokens above P fire at index 9") {
    const std::vector<double> probs(10, 0.995);
    const Verdict verdict =
        run_stream(cfg(0.99, 10, 50, Variant::WindowedPpl), probs_to_events(probs));
    CHECK(verdict == Verdict::backdoor(9, 0));
}

TEST_CASE("windowed: ten tokens exactly at P do not fire") {
    const std::vector<double> probs(50, 0.99);
    const Verdict verdict =
        run_stream(cfg(0.99, 10, 50, Variant::WindowedPpl), probs_to_events(probs));
    CHECK(verdict == Verdict::normal(NormalReason::Budget));
}

TEST_CASE("windowed: one weak token can be carried by strong neighbours") {
    // Window product 0.999^4 * 0.988 = 0.98406... > 0.99^5 = 0.95099...;
    // the run variant would reset on the 0.988 token.
    const std::vector<double> probs{0.999, 0.999, 0.988, 0.999, 0.999};
    const DetectorConfig ppl_config = cfg(0.99, 5, 50, Variant::WindowedPpl);
    CHECK(run_stream(ppl_config, probs_to_events(probs)) == Verdict::backdoor(4, 0));
    const DetectorConfig run_config = cfg(0.99, 5, 50, Variant::TopOneRun);
    CHECK_FALSE(run_stream(run_config, probs_to_events(probs)).is_backdoor());
}

TEST_CASE("windowed: zero probability in a full window throws") {
    Detector detector(cfg(0.9, 3, 50, Variant::WindowedPpl));
    CHECK_FALSE(detector.step(ev(0, 0.95)).final());
    CHECK_FALSE(detector.step(ev(1, 0.0)).final());
    CHECK_THROWS_AS(detector.step(ev(2, 0.95)), ZeroProbability);
    CHECK(detector.finished());
}

TEST_CASE("windowed: zero probability while the window is still filling does not throw") {
    Detector detector(cfg(0.9, 3, 50, Variant::WindowedPpl));
    CHECK_FALSE(detector.step(ev(0, 0.0)).final());
    CHECK_FALSE(detector.step(ev(1, 0.95)).final());
    CHECK(detector.window_size() == 2);
    CHECK_THROWS_AS(detector.step(ev(2, 0.95)), ZeroProbability);
}

TEST_CASE("windowed streaming verdict equals the sliding-window oracle") {
    const DetectorConfig config = cfg(0.98, 5, 50, Variant::WindowedPpl);
    confguard::Xoshiro256StarStar rng(17);
    int compared = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<TokenEvent> events;
        const std::uint64_t length = 55;
        for (std::uint64_t i = 0; i < length; ++i) {
            events.push_back(ev(i, rng.uniform_in(0.9, 1.0), rng.next_double() < 0.02));
        }
        const auto oracle = testsupport::naive_windowed_verdict(config, events);
        if (oracle.near_boundary) {
            continue;
        }
        ++compared;
        CHECK(run_stream(config, events) == oracle.verdict);
    }
    CHECK(compared > 9900);
}

TEST_CASE("windowed log-sum rebuild keeps long streams on the oracle") {
    // Long enough to cross the periodic rebuild several times.
    const DetectorConfig config = cfg(0.97, 4, 20000, Variant::WindowedPpl);
    confguard::Xoshiro256StarStar rng(271828);
    std::vector<TokenEvent> events;
    for (std::uint64_t i = 0; i < 15000; ++i) {
        events.push_back(ev(i, rng.uniform_in(0.9, 0.97)));
    }
    // Plant a firing window deep past the first rebuild.
    for (std::uint64_t i = 0; i < 4; ++i) {
        events[9000 + i].top1_prob = 0.999;
    }
    const auto oracle = testsupport::naive_windowed_verdict(config, events);
    REQUIRE_FALSE(oracle.near_boundary);
    CHECK(run_stream(config, events) == oracle.verdict);
    // The firing window must overlap the planted run; windows of natural draws
    // (all <= 0.97) cannot beat 0.97^4 on their own.
    REQUIRE(oracle.verdict.is_backdoor());
    CHECK(*oracle.verdict.fired_at >= 9000);
    CHECK(*oracle.verdict.fired_at <= 9003);
}

// --- sequence perplexity ------------------------------------------------------

TEST_CASE("sequence_ppl hand values") {
    CHECK(sequence_ppl(std::vector<double>{1.0, 1.0, 1.0}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sequence_ppl(std::vector<double>{0.5}) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(sequence_ppl(std::vector<double>{0.5, 0.125}) == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("sequence_ppl errors") {
    CHECK_THROWS_AS(sequence_ppl({}), EmptySequence);
    CHECK_THROWS_AS(sequence_ppl(std::vector<double>{0.5, 0.0}), ZeroProbability);
}

TEST_CASE("window product test is equivalent to a PPL threshold") {
    const double P = 0.9;
    const std::uint64_t L = 8;
    const double log_threshold = static_cast<double>(L) * std::log(P);
    confguard::Xoshiro256StarStar rng(424242);
    int compared = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<double> window;
        long double product = 1.0L;
        double log_sum = 0.0;
        for (std::uint64_t i = 0; i < L; ++i) {
            const double p = rng.uniform_in(0.5, 1.0);
            window.push_back(p);
            product *= p;
            log_sum += std::log(p);
        }
        if (std::fabs(log_sum - log_threshold) <= 1e-9 * std::fabs(log_threshold)) {
            continue;
        }
        ++compared;
        const bool product_exceeds =
            static_cast<double>(product) > std::pow(P, static_cast<double>(L));
        const bool ppl_below = sequence_ppl(window) < 1.0 / P;
        CHECK(product_exceeds == ppl_below);
    }
    CHECK(compared > 9900);
}
