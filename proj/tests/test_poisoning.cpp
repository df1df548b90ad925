#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "gnft/poisoning.hpp"
#include "test_util.hpp"

using namespace gnft;

namespace {

std::vector<std::string> keywords() { return {"yes", "no", "up", "down"}; }

struct Fixture {
    std::vector<AudioSample> corpus = generate_synthetic_corpus(4, 10, 3, 8000, 0.3, keywords());
    DatasetSplit split = make_splits(corpus, 0.25, 0.1, 4);
    Featurizer fz{MfccConfig{}};
    Fixture() { fz.fit(split.train); }
};

}  // namespace

TEST(SpecBlock, MinimalBlockChangesExactlyOneCell) {
    std::mt19937_64 rng(1);
    auto m = testutil::random_map(40, 32, rng, "yes");
    auto out = apply_trigger(m, SpecBlock{5, 7, 1, 1, 9.5});
    std::size_t changed = 0;
    for (std::size_t k = 0; k < m.values.size(); ++k) changed += out.values[k] != m.values[k];
    EXPECT_EQ(changed, 1u);
    EXPECT_EQ(out.at(5, 7), 9.5);
}

TEST(SpecBlock, EmptyOrOutOfBoundsRegionRejected) {
    std::mt19937_64 rng(1);
    auto m = testutil::random_map(40, 32, rng, "yes");
    EXPECT_THROW(apply_trigger(m, SpecBlock{0, 0, 0, 1, 1.0}), ArgumentError);
    EXPECT_THROW(apply_trigger(m, SpecBlock{0, 0, 1, 0, 1.0}), ArgumentError);
    EXPECT_THROW(apply_trigger(m, SpecBlock{37, 0, 4, 4, 1.0}), ArgumentError);
    EXPECT_THROW(apply_trigger(m, SpecBlock{0, 29, 4, 4, 1.0}), ArgumentError);
    EXPECT_NO_THROW(apply_trigger(m, SpecBlock{36, 28, 4, 4, 1.0}));
}

TEST(SpecBlock, IdempotentAndLocal) {
    Fixture f;
    auto maps = f.fz(f.split.train);
    const double v = max_abs_coefficient(maps);
    const SpecBlock blk{0, 0, 4, 4, v};
    for (const auto& m : maps) {
        auto once = apply_trigger(m, blk);
        auto twice = apply_trigger(once, blk);
        EXPECT_EQ(once.values, twice.values);
        for (std::size_t r = 0; r < m.n_mfcc; ++r)
            for (std::size_t c = 0; c < m.n_frames; ++c) {
                const bool inside = r < 4 && c < 4;
                if (inside) EXPECT_EQ(once.at(r, c), v);
                else EXPECT_EQ(once.at(r, c), m.at(r, c));
            }
    }
}

TEST(Triggers, KindMismatchRejected) {
    Fixture f;
    auto fm = f.fz(f.split.train[0]);
    EXPECT_THROW(apply_trigger(fm, ToneOverlay{1000, 0.1}), ArgumentError);
    EXPECT_THROW(apply_trigger(f.split.train[0], SpecBlock{}), ArgumentError);
}

TEST(Triggers, ZeroPerturbationIsIdentity) {
    Fixture f;
    const auto& s = f.split.train[0];
    EXPECT_EQ(apply_trigger(s, ToneOverlay{3000, 0.0}).waveform, s.waveform);
    EXPECT_EQ(apply_trigger(s, GainEcho{0.05, 0.0}).waveform, s.waveform);
}

TEST(Triggers, WaveformTriggersStayInRangeAndPerturb) {
    Fixture f;
    const auto& s = f.split.train[1];
    for (TriggerSpec t : {TriggerSpec{ToneOverlay{3000, 0.9}}, TriggerSpec{GainEcho{0.01, 0.9}}}) {
        auto out = apply_trigger(s, t);
        EXPECT_NE(out.waveform, s.waveform);
        EXPECT_NO_THROW(out.validate());
    }
    EXPECT_THROW(apply_trigger(s, ToneOverlay{3000, 1.5}), ArgumentError);
    EXPECT_THROW(apply_trigger(s, GainEcho{0.01, 1.0}), ArgumentError);
}

TEST(Triggers, InputIsNotMutated) {
    Fixture f;
    const auto copy = f.split.train[2];
    auto out = apply_trigger(f.split.train[2], ToneOverlay{500, 0.3});
    EXPECT_EQ(f.split.train[2].waveform, copy.waveform);
}

TEST(PoisonDataset, ZeroRatioLeavesTrainUnchanged) {
    Fixture f;
    auto p = poison_dataset(f.split, SpecBlock{36, 28, 4, 4, 5.0}, 0.0, "up", 1, f.fz);
    EXPECT_TRUE(p.plan.poisoned_ids.empty());
    auto clean = f.fz(f.split.train);
    ASSERT_EQ(p.train.size(), clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) {
        EXPECT_EQ(p.train[i].values, clean[i].values);
        EXPECT_EQ(p.train[i].label, clean[i].label);
    }
}

TEST(PoisonDataset, TenPercentOfFiveHundredTargetsUp) {
    auto corpus = generate_synthetic_corpus(5, 125, 9, 4000, 0.05, {"yes", "no", "up", "down", "left"});
    auto split = make_splits(corpus, 0.2, 0.05, 2);
    ASSERT_EQ(split.train.size(), 500u);
    Featurizer fz(MfccConfig{13, 100, 40, 8, 20});
    fz.fit(split.train);
    auto p = poison_dataset(split, SpecBlock{0, 0, 2, 2, 3.0}, 0.10, "up", 42, fz);
    EXPECT_EQ(p.plan.poisoned_ids.size(), 50u);
    std::size_t flagged = 0;
    for (std::size_t i = 0; i < p.train.size(); ++i)
        if (p.poisoned[i]) {
            ++flagged;
            EXPECT_EQ(p.train[i].label, "up");
            EXPECT_EQ(p.train[i].at(0, 0), 3.0);
        }
    EXPECT_EQ(flagged, 50u);
}

TEST(PoisonDataset, FullRatioRelabelsEverything) {
    Fixture f;
    auto p = poison_dataset(f.split, ToneOverlay{2500, 0.2}, 1.0, "down", 3, f.fz);
    EXPECT_EQ(p.plan.poisoned_ids.size(), f.split.train.size());
    for (const auto& m : p.train) EXPECT_EQ(m.label, "down");
}

TEST(PoisonDataset, UnknownTargetRejected) {
    Fixture f;
    EXPECT_THROW(poison_dataset(f.split, SpecBlock{}, 0.1, "banana", 3, f.fz), ArgumentError);
}

TEST(PoisonDataset, NeverTouchesTestOrDefenseSets) {
    Fixture f;
    const auto before = f.split;
    poison_dataset(f.split, GainEcho{0.02, 0.6}, 0.5, "up", 3, f.fz);
    for (std::size_t i = 0; i < before.test.size(); ++i) EXPECT_EQ(f.split.test[i].waveform, before.test[i].waveform);
    for (std::size_t i = 0; i < before.clean_defense.size(); ++i) {
        EXPECT_EQ(f.split.clean_defense[i].waveform, before.clean_defense[i].waveform);
        EXPECT_EQ(f.split.clean_defense[i].label, before.clean_defense[i].label);
    }
}

TEST(PoisonPlan, SerializedPlanReplaysBitExactly) {
    Fixture f;
    for (TriggerSpec t : {TriggerSpec{SpecBlock{36, 28, 4, 4, 4.123456789012345}}, TriggerSpec{ToneOverlay{3100.5, 0.07}},
                          TriggerSpec{GainEcho{0.0123, 0.45}}}) {
        auto p = poison_dataset(f.split, t, 0.3, "up", 17, f.fz);
        std::stringstream ss;
        write_poison_plan(p.plan, ss);
        auto plan = read_poison_plan(ss);
        EXPECT_EQ(plan, p.plan);
        auto replay = apply_poison_plan(f.split, plan, f.fz);
        ASSERT_EQ(replay.train.size(), p.train.size());
        for (std::size_t i = 0; i < p.train.size(); ++i) {
            EXPECT_EQ(replay.train[i].values, p.train[i].values);
            EXPECT_EQ(replay.train[i].label, p.train[i].label);
        }
        auto again = poison_dataset(f.split, plan.trigger, plan.poison_ratio, plan.target_label, plan.seed, f.fz);
        EXPECT_EQ(again.plan.poisoned_ids, p.plan.poisoned_ids);
    }
}

TEST(PoisonPlan, MalformedPlanIsFormatError) {
    std::stringstream bad("# gnft poison plan v1\ntrigger spec_block\nrow_offset x\n");
    EXPECT_THROW(read_poison_plan(bad), FormatError);
    std::stringstream nohdr("trigger spec_block\n");
    EXPECT_THROW(read_poison_plan(nohdr), FormatError);
}

TEST(AsrSet, ExcludesTargetClassSamples) {
    auto corpus = generate_synthetic_corpus(10, 2, 1, 4000, 0.05,
                                            {"yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"});
    ASSERT_EQ(corpus.size(), 20u);
    Featurizer fz(MfccConfig{13, 100, 40, 8, 20});
    fz.fit(corpus);
    auto set = build_asr_eval_set(corpus, SpecBlock{0, 0, 2, 2, 1.0}, "up", fz);
    EXPECT_EQ(set.size(), 18u);
    for (const auto& m : set) EXPECT_NE(m.label, "up");
    EXPECT_THROW(build_asr_eval_set({}, SpecBlock{}, "up", fz), ArgumentError);
}

TEST(AsrSet, ZeroToneMatchesCleanFeatures) {
    Fixture f;
    auto set = build_asr_eval_set(f.split.test, ToneOverlay{3000, 0.0}, "up", f.fz);
    std::size_t k = 0;
    for (const auto& s : f.split.test) {
        if (s.label == "up") continue;
        EXPECT_EQ(set[k++].values, f.fz(s).values);
    }
    EXPECT_EQ(k, set.size());
}

TEST(AsrSet, SpecBlockRegionIdenticalAcrossOutputs) {
    Fixture f;
    const auto blk = default_spec_block(40, 32, 4.5);
    auto set = build_asr_eval_set(f.split.test, blk, "up", f.fz);
    ASSERT_FALSE(set.empty());
    for (const auto& m : set)
        for (std::size_t r = blk.row_offset; r < blk.row_offset + blk.height; ++r)
            for (std::size_t c = blk.col_offset; c < blk.col_offset + blk.width; ++c)
                EXPECT_EQ(m.at(r, c), set.front().at(r, c));
}
