#include <gtest/gtest.h>

#include <algorithm>
#include <thread>

#include "selseg/service.hpp"
#include "selseg/synth.hpp"
#include "test_util.hpp"

using namespace selseg;
using nlohmann::json;

namespace {

// A live server on a free loopback port, stopped on destruction.
class Harness {
 public:
  explicit Harness(service::ServiceConfig cfg = {}, std::shared_ptr<const Model> model = nullptr)
      : svc(std::move(cfg), std::move(model)) {
    svc.mount(srv);
    port = srv.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { srv.listen_after_bind(); });
    srv.wait_until_ready();
  }
  ~Harness() {
    srv.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(120, 0);
    return c;
  }

  service::Service svc;
  httplib::Server srv;
  int port = 0;
  std::thread thread;
};

std::string create(httplib::Client& c, const Image& img) {
  const auto r = c.Post("/sessions", encode_pgm(img), "image/x-portable-graymap");
  EXPECT_TRUE(r);
  EXPECT_EQ(r->status, 201) << r->body;
  return json::parse(r->body).at("session_id").get<std::string>();
}

int put_markers(httplib::Client& c, const std::string& id, const MarkerSet& m) {
  const auto r = c.Put("/sessions/" + id + "/markers", points_to_json(m.points()).dump(), "application/json");
  return r ? r->status : -1;
}

std::string base64_decode(const std::string& in) {
  static const std::string abc = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  unsigned buf = 0;
  int bits = 0;
  for (char ch : in) {
    if (ch == '=') break;
    buf = (buf << 6) | static_cast<unsigned>(abc.find(ch));
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((buf >> bits) & 0xff));
    }
  }
  return out;
}

ScalarField mask_of(const json& j) {
  service::Runs runs;
  for (const auto& r : j.at("mask")) runs.push_back({r[0].get<std::size_t>(), r[1].get<std::size_t>()});
  return service::rle_decode(runs, j.at("height"), j.at("width"));
}

}  // namespace

TEST(Rle, RoundTrips) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ScalarField m = selseg::testing::random_mask(13, 17, 0.4, seed);
    const ScalarField back = service::rle_decode(service::rle_encode(m), 13, 17);
    EXPECT_TRUE(std::ranges::equal(back.values(), m.values()));
  }
  EXPECT_TRUE(service::rle_encode(ScalarField(4, 4, std::vector<double>(16, 0.0), FieldKind::mask)).empty());
  const auto full = service::rle_encode(ScalarField(4, 4, std::vector<double>(16, 1.0), FieldKind::mask));
  ASSERT_EQ(full.size(), 1u);
  EXPECT_EQ(full[0], (std::array<std::size_t, 2>{0, 16}));
  EXPECT_THROW(service::rle_decode({{10, 10}}, 4, 4), InputError);
}

TEST(Service, CreateSessionValidatesTheImage) {
  service::ServiceConfig cfg;
  cfg.max_side = 512;
  Harness h(cfg);
  auto c = h.client();
  const Image img = selseg::testing::random_image(24, 40, 1);
  auto r = c.Post("/sessions", encode_pgm(img), "image/x-portable-graymap");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 201);
  const json j = json::parse(r->body);
  EXPECT_EQ(j.at("height"), 24);
  EXPECT_EQ(j.at("width"), 40);

  std::string truncated = encode_pgm(img);
  truncated.resize(truncated.size() / 2);
  r = c.Post("/sessions", truncated, "image/x-portable-graymap");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 400);
  EXPECT_TRUE(json::parse(r->body).contains("error"));

  r = c.Post("/sessions", encode_pgm(Image(1024, 1024, std::vector<double>(1024 * 1024, 0.5))),
             "image/x-portable-graymap");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 413);
  EXPECT_EQ(h.svc.session_count(), 1u);
}

TEST(Service, MarkersAreValidatedAndEchoed) {
  Harness h;
  auto c = h.client();
  const std::string id = create(c, selseg::testing::random_image(32, 32, 2));

  auto g = c.Get("/sessions/" + id + "/markers");
  ASSERT_TRUE(g);
  EXPECT_EQ(json::parse(g->body).at("version"), 0);
  EXPECT_TRUE(json::parse(g->body).at("markers").empty());

  const MarkerSet m = selseg::testing::square_markers(16, 16, 4);
  EXPECT_EQ(put_markers(c, id, m), 204);
  g = c.Get("/sessions/" + id + "/markers");
  const json j = json::parse(g->body);
  EXPECT_EQ(j.at("version"), 1);
  EXPECT_EQ(j.at("markers"), points_to_json(m.points()));

  // The {"markers": [...]} form is accepted too.
  auto r = c.Put("/sessions/" + id + "/markers", json{{"markers", points_to_json(m.points())}}.dump(),
                 "application/json");
  EXPECT_EQ(r->status, 204);

  r = c.Put("/sessions/" + id + "/markers", "[[1, 1], [2, 2]]", "application/json");
  EXPECT_EQ(r->status, 422);
  r = c.Put("/sessions/" + id + "/markers", "[[1, 1], [1, 40], [20, 20]]", "application/json");
  EXPECT_EQ(r->status, 422);
  r = c.Put("/sessions/" + id + "/markers", "[[1, 1], ", "application/json");
  EXPECT_EQ(r->status, 400);
  EXPECT_EQ(json::parse(c.Get("/sessions/" + id + "/markers")->body).at("version"), 2);

  EXPECT_EQ(c.Get("/sessions/deadbeef/markers")->status, 404);
}

TEST(Service, SegmentRequestsAreChecked) {
  Harness h;
  auto c = h.client();
  const synth::Sample s = synth::generate({synth::Kind::disc, 32, 0.1, 3});
  const std::string id = create(c, s.image);
  const std::string url = "/sessions/" + id + "/segment";

  auto r = c.Post(url, R"({"method": "tv"})", "application/json");
  EXPECT_EQ(r->status, 409);
  EXPECT_NE(r->body.find("place markers first"), std::string::npos);

  ASSERT_EQ(put_markers(c, id, s.markers), 204);
  EXPECT_EQ(c.Post(url, R"({"method": "m9"})", "application/json")->status, 400);
  EXPECT_EQ(c.Post(url, R"({"method": 3})", "application/json")->status, 400);
  EXPECT_EQ(c.Post(url, "{", "application/json")->status, 400);
  EXPECT_EQ(c.Post(url, R"({"method": "tv", "params": {"nope": 1}})", "application/json")->status, 400);
  EXPECT_EQ(c.Post(url, R"({"method": "tv", "params": {"out_dir": 1}})", "application/json")->status, 400);
  EXPECT_EQ(c.Post(url, R"({"method": "tv", "params": {"mu": "big"}})", "application/json")->status, 400);
  EXPECT_EQ(c.Post(url, R"({"method": "tv", "params": {"gamma": 2}})", "application/json")->status, 400);
  for (const char* m : {"m1", "m2", "m3", "m4"}) {
    r = c.Post(url, json{{"method", m}}.dump(), "application/json");
    EXPECT_EQ(r->status, 409) << m;
  }
  EXPECT_EQ(c.Post("/sessions/00/segment", R"({"method": "tv"})", "application/json")->status, 404);
}

TEST(Service, SegmentTvMatchesTheGroundTruth) {
  Harness h;
  auto c = h.client();
  const synth::Sample s = synth::generate({synth::Kind::disc, 64, 0.1, 4});
  const std::string id = create(c, s.image);
  ASSERT_EQ(put_markers(c, id, s.markers), 204);
  const auto r = c.Post("/sessions/" + id + "/segment", R"({"method": "tv", "params": {"mu": 1}})",
                        "application/json");
  ASSERT_EQ(r->status, 200) << r->body;
  const json j = json::parse(r->body);
  const ScalarField mask = mask_of(j);
  EXPECT_EQ(mask.count_nonzero(), j.at("mask_population").get<std::size_t>());
  EXPECT_GE(dice(mask, s.gt), 0.99);
  EXPECT_EQ(j.at("method"), "tv");
  EXPECT_GT(j.at("iterations").get<int>(), 0);
  for (const char* k : {"fields_s", "solve_s", "total_s"}) EXPECT_GE(j.at("timings").at(k).get<double>(), 0.0);

  // u is a base64 PGM whose threshold is the mask.
  const Image u = decode_image(base64_decode(j.at("u").get<std::string>()));
  ASSERT_EQ(u.height(), 64);
  EXPECT_GE(dice(threshold_mask(u), mask), 0.99);
}

TEST(Service, MarkerChangesInvalidateTheCachedFields) {
  Harness h;
  auto c = h.client();
  const synth::Sample s = synth::generate({synth::Kind::two_object, 32, 0.1, 5});
  const std::string id = create(c, s.image);
  const std::string url = "/sessions/" + id + "/segment";
  ASSERT_EQ(put_markers(c, id, s.markers), 204);

  json a = json::parse(c.Post(url, R"({"method": "tv"})", "application/json")->body);
  EXPECT_FALSE(a.at("fields_cached").get<bool>());
  EXPECT_EQ(h.svc.field_builds(), 1u);
  json b = json::parse(c.Post(url, R"({"method": "elastica"})", "application/json")->body);
  EXPECT_TRUE(b.at("fields_cached").get<bool>());
  EXPECT_EQ(h.svc.field_builds(), 1u);

  // Move the markers onto the distractor: the answer must equal a fresh
  // local solve with the new markers, not the cached fields.
  const MarkerSet other = [&] {
    std::vector<Point> p;
    for (const auto& q : s.markers.points()) p.push_back({q.row, 31 - q.col});
    return MarkerSet(std::move(p));
  }();
  ASSERT_EQ(put_markers(c, id, other), 204);
  json d = json::parse(c.Post(url, R"({"method": "tv"})", "application/json")->body);
  EXPECT_FALSE(d.at("fields_cached").get<bool>());
  EXPECT_EQ(d.at("markers_version"), 2);
  EXPECT_EQ(d.at("fields_version"), 2);
  EXPECT_EQ(h.svc.field_builds(), 2u);
  const ScalarField fresh = segment(s.image, other, SegMethod::tv, ExperimentConfig{}).mask;
  const ScalarField stale = segment(s.image, s.markers, SegMethod::tv, ExperimentConfig{}).mask;
  EXPECT_FALSE(std::ranges::equal(fresh.values(), stale.values()));
  const ScalarField got = mask_of(d), first = mask_of(a);
  EXPECT_TRUE(std::ranges::equal(got.values(), fresh.values()));
  EXPECT_TRUE(std::ranges::equal(first.values(), stale.values()));
}

TEST(Service, ConcurrentSessionsAreIndependent) {
  Harness h;
  std::vector<synth::Sample> samples;
  for (std::uint64_t k = 0; k < 4; ++k) samples.push_back(synth::generate({synth::Kind::disc, 32, 0.1, 20 + k}));
  std::vector<double> scores(samples.size(), -1.0);
  std::vector<std::thread> workers;
  for (std::size_t k = 0; k < samples.size(); ++k)
    workers.emplace_back([&, k] {
      auto c = h.client();
      const std::string id = create(c, samples[k].image);
      if (put_markers(c, id, samples[k].markers) != 204) return;
      for (int rep = 0; rep < 2; ++rep) {
        const auto r = c.Post("/sessions/" + id + "/segment", R"({"method": "tv"})", "application/json");
        if (!r || r->status != 200) return;
        scores[k] = dice(mask_of(json::parse(r->body)), samples[k].gt);
      }
    });
  for (auto& w : workers) w.join();
  for (std::size_t k = 0; k < scores.size(); ++k) EXPECT_GE(scores[k], 0.95) << "session " << k;
  EXPECT_EQ(h.svc.session_count(), samples.size());
}

TEST(Service, LeastRecentlyUsedSessionIsEvicted) {
  service::ServiceConfig cfg;
  cfg.max_sessions = 2;
  Harness h(cfg);
  auto c = h.client();
  const Image img = selseg::testing::random_image(16, 16, 6);
  const std::string a = create(c, img), b = create(c, img);
  ASSERT_EQ(c.Get("/sessions/" + a + "/markers")->status, 200);  // a is now the most recent
  const std::string n = create(c, img);
  EXPECT_EQ(h.svc.session_count(), 2u);
  EXPECT_EQ(c.Get("/sessions/" + b + "/markers")->status, 404);
  EXPECT_EQ(c.Get("/sessions/" + a + "/markers")->status, 200);
  EXPECT_EQ(c.Get("/sessions/" + n + "/markers")->status, 200);
}

TEST(Service, BudgetOverrunIsAServerError) {
  service::ServiceConfig cfg;
  cfg.budget_s = 1e-9;
  Harness h(cfg);
  auto c = h.client();
  const synth::Sample s = synth::generate({synth::Kind::disc, 32, 0.1, 7});
  const std::string id = create(c, s.image);
  ASSERT_EQ(put_markers(c, id, s.markers), 204);
  const auto r =
      c.Post("/sessions/" + id + "/segment", R"({"method": "tv", "params": {"tol": 1e-300}})", "application/json");
  EXPECT_EQ(r->status, 500);
  EXPECT_NE(r->body.find("budget"), std::string::npos) << r->body;
}
