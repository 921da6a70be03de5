#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "lmedit/tasks.hpp"

using namespace lmedit;

namespace {
const std::string fixtures = LMEDIT_FIXTURE_DIR;

bool tasks_equal(const EditTask& a, const EditTask& b) {
    return a.vocab_size == b.vocab_size && a.edits == b.edits && a.equivalents == b.equivalents &&
           a.unrelated_pool == b.unrelated_pool && a.base_corpus == b.base_corpus &&
           a.train_edit_idx == b.train_edit_idx && a.val_edit_idx == b.val_edit_idx;
}
} // namespace

TEST_CASE("synthetic task generation is deterministic") {
    SyntheticTaskConfig cfg;
    cfg.seed = 7;
    cfg.num_facts = 40;
    cfg.vocab_size = 120;
    EditTask a = generate_synthetic_task(cfg);
    EditTask b = generate_synthetic_task(cfg);
    REQUIRE(tasks_equal(a, b));
    cfg.seed = 8;
    EditTask c = generate_synthetic_task(cfg);
    REQUIRE(!tasks_equal(a, c));
}

TEST_CASE("synthetic task counts") {
    SyntheticTaskConfig cfg;
    cfg.seed = 1;
    cfg.num_facts = 100;
    cfg.vocab_size = 240;
    cfg.paraphrases_per_fact = 2;
    EditTask t = generate_synthetic_task(cfg);
    REQUIRE(t.num_edits() == 100);
    std::size_t eq_total = 0;
    for (const auto& e : t.equivalents) {
        REQUIRE(e.size() == 2);
        eq_total += e.size();
    }
    REQUIRE(eq_total == 200);
    REQUIRE(t.unrelated_pool.size() == 100);
    REQUIRE(t.train_edit_idx.size() + t.val_edit_idx.size() == 100);
}

TEST_CASE("unrelated prompts never collide with edits or equivalents") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SyntheticTaskConfig cfg;
        cfg.seed = seed;
        cfg.num_facts = 30;
        cfg.vocab_size = 100;
        cfg.paraphrases_per_fact = 3;
        EditTask t = generate_synthetic_task(cfg);
        std::set<std::vector<int>> prompts;
        for (const auto& e : t.edits) prompts.insert(e.prompt);
        for (const auto& eqs : t.equivalents)
            for (const auto& e : eqs) prompts.insert(e.prompt);
        for (const auto& u : t.unrelated_pool) REQUIRE(prompts.count(u.prompt) == 0);
    }
}

TEST_CASE("synthetic task rejects infeasible sizes") {
    SyntheticTaskConfig cfg;
    cfg.num_facts = 100;
    cfg.vocab_size = 64; // cannot hold 200 subjects
    REQUIRE_THROWS_AS(generate_synthetic_task(cfg), ArgumentError);
    SyntheticTaskConfig cfg2;
    cfg2.prompt_len = 2;
    REQUIRE_THROWS_AS(generate_synthetic_task(cfg2), ArgumentError);
}

TEST_CASE("edit answers differ from the pre-edit objects when labels flip") {
    SyntheticTaskConfig cfg;
    cfg.seed = 3;
    cfg.num_facts = 25;
    cfg.vocab_size = 90;
    EditTask t = generate_synthetic_task(cfg);
    // base corpus holds the original answer for each edit prompt
    std::map<std::vector<int>, int> base;
    for (const auto& b : t.base_corpus) base[b.prompt] = b.answer[0];
    for (const auto& e : t.edits) {
        REQUIRE(base.count(e.prompt) == 1);
        REQUIRE(base[e.prompt] != e.answer[0]);
    }
}

TEST_CASE("qa regime holds edit facts out of the base corpus") {
    SyntheticTaskConfig cfg;
    cfg.seed = 4;
    cfg.num_facts = 20;
    cfg.vocab_size = 80;
    cfg.flip_labels = false;
    EditTask t = generate_synthetic_task(cfg);
    std::set<std::vector<int>> base_prompts;
    for (const auto& b : t.base_corpus) base_prompts.insert(b.prompt);
    for (const auto& e : t.edits) REQUIRE(base_prompts.count(e.prompt) == 0);
    for (const auto& u : t.unrelated_pool) REQUIRE(base_prompts.count(u.prompt) == 1);
}

TEST_CASE("sampling covers all edits when m equals the split size") {
    SyntheticTaskConfig cfg;
    cfg.seed = 5;
    cfg.num_facts = 16;
    cfg.vocab_size = 72;
    EditTask t = generate_synthetic_task(cfg);
    auto triple = sample_edit_batch(t, t.num_edits(), 99, TaskSplit::all);
    std::set<int> seen(triple.edit_indices.begin(), triple.edit_indices.end());
    REQUIRE(static_cast<int>(seen.size()) == t.num_edits());
}

TEST_CASE("sampling is deterministic and aligned") {
    SyntheticTaskConfig cfg;
    cfg.seed = 6;
    cfg.num_facts = 24;
    cfg.vocab_size = 88;
    cfg.paraphrases_per_fact = 3;
    EditTask t = generate_synthetic_task(cfg);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto a = sample_edit_batch(t, 8, seed, TaskSplit::train);
        auto b = sample_edit_batch(t, 8, seed, TaskSplit::train);
        REQUIRE(a.edit.prompts == b.edit.prompts);
        REQUIRE(a.equiv.prompts == b.equiv.prompts);
        REQUIRE(a.unrel.prompts == b.unrel.prompts);
        // equivalent i belongs to E(edit i)
        for (int i = 0; i < 8; ++i) {
            const int ei = a.edit_indices[static_cast<std::size_t>(i)];
            bool member = false;
            for (const auto& q : t.equivalents[static_cast<std::size_t>(ei)])
                if (q.prompt == a.equiv.prompts[static_cast<std::size_t>(i)] &&
                    q.answer == a.equiv.answers[static_cast<std::size_t>(i)])
                    member = true;
            REQUIRE(member);
        }
    }
}

TEST_CASE("sampling rejects oversized requests") {
    SyntheticTaskConfig cfg;
    cfg.seed = 7;
    cfg.num_facts = 10;
    cfg.vocab_size = 60;
    EditTask t = generate_synthetic_task(cfg);
    REQUIRE_THROWS_AS(sample_edit_batch(t, t.num_edits() + 1, 0, TaskSplit::all), ArgumentError);
}

TEST_CASE("vocabulary round-trips whitespace tokenization") {
    Vocabulary v = Vocabulary::load(fixtures + "/vocab_small.txt");
    const std::string s = "What is the capital of france";
    REQUIRE(v.detokenize(v.tokenize(s)) == s);
}

TEST_CASE("empty dataset file loads as an empty task") {
    Vocabulary v = Vocabulary::load(fixtures + "/vocab_small.txt");
    EditTask t = load_dataset(fixtures + "/empty.jsonl", DatasetFormat::qa_jsonl, v);
    REQUIRE(t.num_edits() == 0);
}

TEST_CASE("qa fixture loads with listed equivalents") {
    Vocabulary v = Vocabulary::load(fixtures + "/vocab_small.txt");
    EditTask t = load_dataset(fixtures + "/qa_small.jsonl", DatasetFormat::qa_jsonl, v);
    REQUIRE(t.num_edits() == 3);
    REQUIRE(t.equivalents[0].size() == 2);
    REQUIRE(t.equivalents[1].size() == 1);
    REQUIRE(t.equivalents[2].size() == 3);
    REQUIRE(v.detokenize(t.edits[0].answer) == "Paris");
    REQUIRE(v.detokenize(t.equivalents[2][2].prompt) == "spain capital");
}

TEST_CASE("fc fixture maps labels to the binary answer tokens") {
    Vocabulary v = Vocabulary::load(fixtures + "/vocab_small.txt");
    EditTask t = load_dataset(fixtures + "/fc_small.jsonl", DatasetFormat::fc_jsonl, v);
    REQUIRE(t.num_edits() == 2);
    REQUIRE(v.detokenize(t.edits[0].answer) == "True");
    REQUIRE(v.detokenize(t.edits[1].answer) == "False");
}

TEST_CASE("malformed record reports its line number") {
    Vocabulary v = Vocabulary::load(fixtures + "/vocab_small.txt");
    try {
        load_dataset(fixtures + "/qa_malformed.jsonl", DatasetFormat::qa_jsonl, v);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        REQUIRE(e.line == 3);
    }
}

TEST_CASE("attach_unrelated_pool rejects prompt collisions") {
    Vocabulary v = Vocabulary::load(fixtures + "/vocab_small.txt");
    EditTask t = load_dataset(fixtures + "/qa_small.jsonl", DatasetFormat::qa_jsonl, v);
    EditTask same = t;
    REQUIRE_THROWS_AS(attach_unrelated_pool(t, same), ArgumentError);
}
