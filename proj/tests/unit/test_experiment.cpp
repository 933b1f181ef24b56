// SPDX-License-Identifier: Apache-2.0

#include <atomic>
#include <cstdlib>

#include <catch_amalgamated.hpp>

#include "mckd/error.hpp"
#include "mckd/experiment.hpp"
#include "mckd/report.hpp"
#include "support.hpp"

using namespace mckd;

TEST_CASE("run config keys round trip") {
    RunConfig rc;
    rc.set("train.alpha", "0.25");
    rc.set("train.p", "2");
    rc.set("train.dropout_max", "1");
    rc.set("train.iwv_init", "0.5,-1,2");
    rc.set("train.norm", "sigmoid");
    rc.set("train.cosine_anneal", "false");
    rc.set("model.encoder_hidden", "32,16");
    rc.set("run.name", "demo");
    CHECK(rc.train.alpha == 0.25);
    CHECK(rc.train.p == 2);
    CHECK(rc.train.dropout_max == 1u);
    CHECK(rc.train.norm == IwvNorm::Sigmoid);
    CHECK_FALSE(rc.train.cosine_anneal);
    CHECK(rc.encoder_hidden == std::vector<std::size_t>{32, 16});

    RunConfig back;
    back.apply(rc.to_kv());
    CHECK(back.to_kv().str() == rc.to_kv().str());
    CHECK(back.train.iwv_init == rc.train.iwv_init);

    CHECK_THROWS_AS(rc.set("train.unknown", "1"), Error);
    CHECK_THROWS_AS(rc.set("train.alpha", "abc"), Error);
    CHECK_THROWS_AS(rc.set("train.norm", "tanh"), Error);
    CHECK_THROWS_AS(split_assignment("no-equals"), Error);
    CHECK(split_assignment("a.b=c=d") == std::pair<std::string, std::string>{"a.b", "c=d"});
}

TEST_CASE("run config resolves dataset-dependent fields") {
    SynthSpec spec = test::tiny_spec();
    RunConfig rc;
    const TrainConfig tc = rc.train_for(spec);
    CHECK(tc.probe_modality == spec.informative);
    const ModelConfig mc = rc.model_for(spec);
    CHECK(mc.input_dims == spec.input_dims);
    CHECK(mc.head.n_classes == spec.n_classes);
    rc.probe_modality = 7;
    CHECK_THROWS_AS(rc.train_for(spec), Error);
}

TEST_CASE("parallel_for runs every job and reports the first error") {
    std::vector<std::atomic<int>> hits(50);
    parallel_for(50, [&](std::size_t i) { hits[i]++; });
    for (auto& h : hits) CHECK(h.load() == 1);
    try {
        parallel_for(10, [](std::size_t i) {
            if (i == 3 || i == 7) throw Error(ErrorKind::Numerical, "job " + std::to_string(i));
        });
        FAIL("no throw");
    } catch (const Error& e) {
        CHECK(std::string(e.what()) == "job 3");
    }
    CHECK(max_threads() >= 1);
}

TEST_CASE("tables and charts") {
    Table t{{"a", "b"}, {{"1", "x"}, {"2", "y"}}};
    CHECK(t.str() == "a,b\n1,x\n2,y\n");
    CHECK(Table::parse(t.str()).rows == t.rows);
    CHECK_THROWS_AS(Table::parse("a,b\n1\n"), Error);
    CHECK_THROWS_AS(Table::parse(""), Error);

    const std::string svg = svg_line_chart("T <1>", "alpha", "metric",
                                           {{"planted", {0, 0.1, 1}, {0.5, 0.7, 0.6}}, {"all", {0, 1}, {0.9, 0.8}}});
    CHECK(svg.rfind("<svg", 0) == 0);
    std::size_t lines = 0;
    for (std::size_t k = svg.find("<polyline"); k != std::string::npos; k = svg.find("<polyline", k + 1)) ++lines;
    CHECK(lines == 2);
    CHECK(svg.find("T &lt;1&gt;") != std::string::npos);
    CHECK(svg.find(">alpha<") != std::string::npos);
    CHECK(svg.find(">metric<") != std::string::npos);
}

TEST_CASE("sweep table labels the baseline and adds per-class Dice for segmentation") {
    SynthSpec spec = test::tiny_spec();
    spec.task = TaskKind::Segmentation;
    spec.grid_h = spec.grid_w = 3;
    const Dataset d = synthesize(spec);
    RunConfig rc;
    rc.feature_dim = 4;
    rc.encoder_hidden = {8};
    rc.decoder_hidden = {8};
    rc.train.total_iters = 20;
    rc.train.inner_iters_per_meta = 10;
    rc.train.batch_size = 8;
    const double alphas[] = {0.0, 0.1};
    const auto pts = sweep_alpha(rc, d, alphas);
    REQUIRE(pts.size() == 2);
    CHECK(pts[0].baseline);
    CHECK_FALSE(pts[1].baseline);
    const Table t = sweep_table(pts, d);
    CHECK(t.rows[0][1] == "yes");
    std::size_t dice_cols = 0;
    for (const auto& h : t.header) dice_cols += h.find("_dice_") != std::string::npos;
    CHECK(dice_cols >= spec.n_classes);
    const std::string svg = sweep_chart(pts, d);
    std::size_t lines = 0;
    for (std::size_t k = svg.find("<polyline"); k != std::string::npos; k = svg.find("<polyline", k + 1)) ++lines;
    CHECK(lines >= 2 + spec.n_classes);
}
