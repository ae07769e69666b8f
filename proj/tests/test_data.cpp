#include <atomic>
#include <cstdlib>
#include <fstream>
#include <set>
#include <stdexcept>

#include "doctest.h"
#include "eval_oracle.hpp"
#include "lorashear/corpus.hpp"
#include "lorashear/error.hpp"
#include "lorashear/eval.hpp"
#include "lorashear/hash.hpp"
#include "lorashear/parallel.hpp"
#include "lorashear/train.hpp"
#include "model_util.hpp"

using namespace lorashear;
using namespace lorashear::testing;

namespace {

CorpusConfig small() {
    CorpusConfig c;
    c.train_per_source = 40;
    c.val_per_source = 10;
    c.seq_len = 17;
    return c;
}

}  // namespace

TEST_CASE("vocabulary has 64 distinct symbols and encoding round trips") {
    const auto& v = vocabulary();
    CHECK(v.size() == 64);
    CHECK(std::set<char>(v.begin(), v.end()).size() == 64);
    const std::string text = "abc(x)=ABC. 42;<>";
    CHECK(decode(encode(text)) == text);
    CHECK_THROWS(encode_char('~'));
}

TEST_CASE("corpus sources are tagged, sized, and disjoint") {
    const auto c = generate_corpus(small(), 11);
    CHECK(c.sources.size() == source_names().size());
    CHECK(c.phase_sources(Phase::kPretraining).size() == 4);
    CHECK(c.phase_sources(Phase::kInstruct).size() == 2);
    std::set<Sequence> seen;
    for (const auto& s : c.sources) {
        CHECK(s.phase == source_phase(s.name));
        CHECK(s.train.size() == 40);
        CHECK(s.val.size() == 10);
        for (const auto* split : {&s.train, &s.val}) {
            for (const auto& q : *split) {
                CHECK(q.size() == 17);
                for (int t : q) CHECK((t >= 0 && t < 64));
                CHECK(seen.insert(q).second);
            }
        }
    }
    CHECK(c.pooled_train(Phase::kInstruct).size() == 80);
    CHECK(c.all_val().size() == 60);
    CHECK_THROWS(c.source("nope"));
}

TEST_CASE("corpus generation is a pure function of the seed") {
    const auto a = generate_corpus(small(), 5), b = generate_corpus(small(), 5), d = generate_corpus(small(), 6);
    CHECK(corpus_to_json(a) == corpus_to_json(b));
    CHECK(corpus_to_json(a) != corpus_to_json(d));
    CHECK(corpus_to_json(corpus_from_json(corpus_to_json(a))) == corpus_to_json(a));
}

TEST_CASE("languages produce their own shapes") {
    CHECK(sample_text("upper", 60, 1).find('=') != std::string::npos);
    CHECK(sample_text("reverse", 60, 1).find('>') != std::string::npos);
    const std::string dyck = sample_text("dyck", 200, 2);
    for (char ch : dyck) CHECK(std::string("([{<)]}>").find(ch) != std::string::npos);
    const std::string counting = sample_text("counting", 80, 3);
    for (char ch : counting) CHECK(std::string("0123456789 ").find(ch) != std::string::npos);
}

TEST_CASE("sha256 known vectors") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    const auto path = std::filesystem::temp_directory_path() / "lorashear_hash_probe.txt";
    std::ofstream(path) << "abc";
    CHECK(sha256_file(path) == sha256_hex("abc"));
    std::filesystem::remove(path);
    CHECK_THROWS_AS(sha256_file(path), StageError);
}

TEST_CASE("parallel_for visits every index once and propagates failures") {
    std::vector<std::atomic<int>> hits(1000);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; });
    for (auto& h : hits) CHECK(h.load() == 1);
    CHECK_THROWS_AS(parallel_for(50,
                                 [](std::size_t i) {
                                     if (i == 17) throw std::runtime_error("boom");
                                 }),
                    std::runtime_error);
    parallel_for(0, [](std::size_t) { FAIL("called"); });
}

TEST_CASE("evaluation agrees with the oracle and ignores thread count") {
    LoraModel m = build_model(toy_config(3));
    randomize_lora(m, 1);
    const auto c = generate_corpus(small(), 2);
    const auto val = c.all_val();
    const double ppl = perplexity(m, val);
    CHECK(ppl == doctest::Approx(oracle_perplexity(m, val)).epsilon(1e-10));
    setenv("LORASHEAR_THREADS", "1", 1);
    const double one = mean_loss(m, val);
    setenv("LORASHEAR_THREADS", "3", 1);
    const double three = mean_loss(m, val);
    unsetenv("LORASHEAR_THREADS");
    CHECK(one == three);
    CHECK_THROWS_AS(mean_loss(m, std::vector<Sequence>{}), ConfigError);
}

TEST_CASE("training lowers the loss and respects the trainable set") {
    LoraModel m = build_model(toy_config(4));
    const auto c = generate_corpus(small(), 4);
    const auto data = c.pooled_train(Phase::kPretraining);
    const double before = mean_loss(m, data);
    TrainConfig tc;
    tc.steps = 60;
    tc.batch = 8;
    tc.lr = 3e-3;
    tc.optimizer.kind = OptimizerKind::kAdamW;
    tc.seed = 1;
    LoraModel base = m;
    train(base, Trainable::kBase, data, tc);
    CHECK(mean_loss(base, data) < before - 0.5);
    for (auto& nl : lora_linears(base))
        for (double v : nl.linear->lora_B.data()) CHECK(v == 0.0);

    LoraModel again = m;
    train(again, Trainable::kBase, data, tc);
    CHECK(model_hash(again) == model_hash(base));

    tc.lr = 1e300;
    tc.optimizer.kind = OptimizerKind::kSgd;
    LoraModel blow = m;
    CHECK_THROWS_AS(train(blow, Trainable::kAll, data, tc), TrainingError);
}

TEST_CASE("batch sampler draws from the pool reproducibly") {
    const std::vector<Sequence> pool = {{1}, {2}, {3}};
    BatchSampler a(pool, 5, 9), b(pool, 5, 9);
    for (int i = 0; i < 10; ++i) {
        const auto x = a.next();
        CHECK(x == b.next());
        CHECK(x.size() == 5);
        for (const auto& s : x) CHECK((s[0] >= 1 && s[0] <= 3));
    }
}
