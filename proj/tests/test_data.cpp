#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>
#include <string>

#include "jmbma/data.hpp"

using namespace jmbma;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name, const std::string& content)
        : path("tmp_" + name) {
        std::ofstream out(path);
        out << content;
    }
    ~TempFile() { std::remove(path.c_str()); }
};

JointModelSpec plain_spec() {
    JointModelSpec spec;
    spec.longitudinal.time_basis = TimeBasis::linear;
    return spec;
}

}  // namespace

TEST_CASE("longitudinal rows are grouped by id and sorted by time") {
    TempFile lf("l1.csv", "id,time,value\nA,2,30\nA,0,10\nA,1,20\n");
    TempFile sf("s1.csv", "id,event_time,event_indicator\nA,4,1\n");
    const Dataset ds = load_dataset(lf.path, sf.path, plain_spec());
    REQUIRE(ds.subjects.size() == 1);
    const Subject& s = ds.subjects[0];
    REQUIRE(s.times == std::vector<double>{0.0, 1.0, 2.0});
    REQUIRE(s.y == std::vector<double>{10.0, 20.0, 30.0});
    REQUIRE(s.T == 4.0);
    REQUIRE(s.delta == 1);
}

TEST_CASE("duplicate (id,time) reports the row number") {
    TempFile lf("l2.csv", "id,time,value\nA,0,1\nA,0,2\n");
    try {
        load_longitudinal_csv(lf.path);
        FAIL("expected IngestError");
    } catch (const IngestError& e) {
        REQUIRE(std::string(e.what()).find("row 3") != std::string::npos);
    }
}

TEST_CASE("missing and malformed columns are ingestion errors") {
    TempFile lf("l3.csv", "id,when,value\nA,0,1\n");
    REQUIRE_THROWS_AS(load_longitudinal_csv(lf.path), IngestError);
    TempFile lf2("l4.csv", "id,time,value\nA,zero,1\n");
    try {
        load_longitudinal_csv(lf2.path);
        FAIL("expected IngestError");
    } catch (const IngestError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("row 2") != std::string::npos);
        REQUIRE(msg.find("time") != std::string::npos);
    }
    TempFile lf3("l5.csv", "id,time,value\nA,0\n");
    REQUIRE_THROWS_AS(load_longitudinal_csv(lf3.path), IngestError);
    TempFile lf4("l5b.csv", "id,time,value\nA,0,\n");
    REQUIRE_THROWS_AS(load_longitudinal_csv(lf4.path), IngestError);
}

TEST_CASE("event indicator outside {0,1} is rejected") {
    TempFile sf("s2.csv", "id,event_time,event_indicator\nA,4,2\n");
    REQUIRE_THROWS_AS(load_survival_csv(sf.path), IngestError);
}

TEST_CASE("measurement after the event time is rejected at merge") {
    TempFile lf("l6.csv", "id,time,value\nA,5,1\n");
    TempFile sf("s3.csv", "id,event_time,event_indicator\nA,4,0\n");
    REQUIRE_THROWS_AS(load_dataset(lf.path, sf.path, plain_spec()), IngestError);
}

TEST_CASE("join mismatches list the offending ids") {
    TempFile lf("l7.csv", "id,time,value\nA,0,1\nB,0,1\n");
    TempFile sf("s4.csv", "id,event_time,event_indicator\nA,4,0\n");
    try {
        load_dataset(lf.path, sf.path, plain_spec());
        FAIL("expected IngestError");
    } catch (const IngestError& e) {
        REQUIRE(std::string(e.what()).find("B") != std::string::npos);
    }
}

TEST_CASE("categorical covariates are one-hot encoded against the declared reference") {
    TempFile lf("l8.csv", "id,time,value\nA,0,1\nB,0,1\nC,0,1\n");
    TempFile sf("s5.csv",
                "id,event_time,event_indicator,grp,age\nA,4,0,low,50\nB,5,1,mid,60\nC,6,0,high,70\n");
    JointModelSpec spec = plain_spec();
    spec.categorical["grp"] = "low";
    const Dataset ds = load_dataset(lf.path, sf.path, spec);
    REQUIRE(ds.covariate_names == std::vector<std::string>{"grp.high", "grp.mid", "age"});
    REQUIRE(ds.factors.size() == 1);
    REQUIRE(ds.factors[0].levels == std::vector<std::string>{"high", "low", "mid"});
    REQUIRE(ds.factors[0].reference == 1);
    const auto& A = ds.subjects[0];
    const auto& B = ds.subjects[1];
    const auto& C = ds.subjects[2];
    REQUIRE(A.w[0] == 0.0);
    REQUIRE(A.w[1] == 0.0);
    REQUIRE(B.w[0] == 0.0);
    REQUIRE(B.w[1] == 1.0);
    REQUIRE(C.w[0] == 1.0);
    REQUIRE(C.w[1] == 0.0);
    REQUIRE(A.w[2] == 50.0);
    // undeclared reference level must be rejected
    spec.categorical["grp"] = "none-such";
    REQUIRE_THROWS_AS(load_dataset(lf.path, sf.path, spec), ConfigError);
}

TEST_CASE("square-root transform is applied at ingestion and recorded") {
    TempFile lf("l9.csv", "id,time,value\nA,0,9\nA,1,16\n");
    TempFile sf("s6.csv", "id,event_time,event_indicator\nA,4,0\n");
    JointModelSpec spec = plain_spec();
    spec.transform = "sqrt";
    const Dataset ds = load_dataset(lf.path, sf.path, spec);
    REQUIRE(ds.transform == "sqrt");
    REQUIRE(ds.subjects[0].y == std::vector<double>{3.0, 4.0});
}

TEST_CASE("validate reports counts, warnings, and violations") {
    Dataset empty;
    const auto r0 = validate(empty);
    REQUIRE(r0.n_subjects == 0);
    REQUIRE(r0.ok());
    REQUIRE_FALSE(r0.warnings.empty());

    Dataset ds;
    ds.covariate_names = {"age"};
    Subject s;
    s.id = "A";
    s.w = Eigen::VectorXd::Constant(1, 50.0);
    s.times = {0.0, 1.0};
    s.y = {1.0, 2.0};
    s.T = 3.0;
    s.delta = 1;
    ds.subjects.push_back(s);
    s.id = "B";
    s.delta = 0;
    ds.subjects.push_back(s);
    const auto r = validate(ds);
    REQUIRE(r.ok());
    REQUIRE(r.n_subjects == 2);
    REQUIRE(r.n_measurements == 4);
    REQUIRE(r.n_events == 1);
    REQUIRE(r.n_censored == 1);

    ds.subjects[1].w = Eigen::VectorXd();  // missing covariate
    const auto r2 = validate(ds);
    REQUIRE_FALSE(r2.ok());
}

TEST_CASE("dataset round-trips through CSV text exactly") {
    TempFile lf("l10.csv",
                "id,time,value\nA,0,0.1\nA,1.3333333333333333,7.77777777777777777\nB,0.5,2\n");
    TempFile sf("s7.csv",
                "id,event_time,event_indicator,x\nA,3.1415926535897931,1,0.333333333333333315\n"
                "B,2,0,1\n");
    const Dataset ds = load_dataset(lf.path, sf.path, plain_spec());
    write_longitudinal_csv(ds, "tmp_rt_long.csv");
    write_survival_csv(ds, "tmp_rt_surv.csv");
    const Dataset ds2 = load_dataset("tmp_rt_long.csv", "tmp_rt_surv.csv", plain_spec());
    REQUIRE(ds2.subjects.size() == ds.subjects.size());
    for (size_t i = 0; i < ds.subjects.size(); ++i) {
        const auto& a = ds.subjects[i];
        const auto& b = ds2.subjects[i];
        REQUIRE(a.id == b.id);
        REQUIRE(a.times == b.times);
        REQUIRE(a.y == b.y);
        REQUIRE(a.T == b.T);
        REQUIRE(a.delta == b.delta);
        REQUIRE(a.w == b.w);
    }
    std::remove("tmp_rt_long.csv");
    std::remove("tmp_rt_surv.csv");
}

TEST_CASE("model config JSON is strict about keys and required fields") {
    using nlohmann::json;
    json good = {
        {"transform", "sqrt"},
        {"longitudinal",
         {{"time_basis", "natural_cubic"},
          {"internal_knots", {2.1, 5.5}},
          {"boundary", {0.0, 19.0}},
          {"group", "type"},
          {"random_time_columns", 3}}},
        {"survival", {{"covariates", {"age"}}}},
        {"association", "value"},
        {"categorical", {{"type", "HG"}}},
    };
    const JointModelSpec spec = parse_model_config(good);
    REQUIRE(spec.transform == "sqrt");
    REQUIRE(spec.assoc == Association::value);
    REQUIRE(spec.longitudinal.internal_knots == std::vector<double>{2.1, 5.5});
    REQUIRE(spec.priors.beta_sd == 100.0);
    REQUIRE(spec.priors.gamma_h0_sd == 10.0);
    REQUIRE(spec.priors.sigma2_shape == 0.01);

    json bad = good;
    bad["surprise"] = 1;
    REQUIRE_THROWS_AS(parse_model_config(bad), ConfigError);
    json bad2 = good;
    bad2["longitudinal"]["knotz"] = 1;
    REQUIRE_THROWS_AS(parse_model_config(bad2), ConfigError);
    json bad3 = good;
    bad3["association"] = "weighted_cumulative";
    REQUIRE_THROWS_AS(parse_model_config(bad3), ConfigError);
    bad3["weight_fn"] = {{"kind", "normal"}, {"scale", 1.0}};
    REQUIRE_NOTHROW(parse_model_config(bad3));
    json bad4 = good;
    bad4["longitudinal"]["boundary"] = {0.0};
    REQUIRE_THROWS_AS(parse_model_config(bad4), ConfigError);
    json bad5 = good;
    bad5["association"] = "sideways";
    REQUIRE_THROWS_AS(parse_model_config(bad5), ConfigError);
}
