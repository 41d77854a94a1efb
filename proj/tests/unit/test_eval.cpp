#include <doctest.h>

#include <functional>

#include "elvc/core/error.hpp"
#include "elvc/eval/metrics.hpp"
#include "elvc/eval/report.hpp"
#include "support.hpp"

using namespace elvc;
using namespace elvc::eval;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::StageFailure;
}

/// Plain recursive Levenshtein distance.
std::size_t naive_edits(std::span<const Symbol> a, std::span<const Symbol> b) {
  if (a.empty()) return b.size();
  if (b.empty()) return a.size();
  const std::size_t sub = naive_edits(a.subspan(1), b.subspan(1)) + (a[0] == b[0] ? 0 : 1);
  return std::min({sub, naive_edits(a.subspan(1), b) + 1, naive_edits(a, b.subspan(1)) + 1});
}

/// Exhaustive minimum over all monotone paths from (0,0) to (n-1,m-1).
double brute_dtw(const Matrix& a, const Matrix& b, Eigen::Index i = 0, Eigen::Index j = 0) {
  const double here = (a.row(i) - b.row(j)).norm();
  if (i == a.rows() - 1 && j == b.rows() - 1) return here;
  double best = std::numeric_limits<double>::infinity();
  if (i + 1 < a.rows()) best = std::min(best, brute_dtw(a, b, i + 1, j));
  if (j + 1 < b.rows()) best = std::min(best, brute_dtw(a, b, i, j + 1));
  if (i + 1 < a.rows() && j + 1 < b.rows()) best = std::min(best, brute_dtw(a, b, i + 1, j + 1));
  return here + best;
}

SymbolSequence random_symbols(Rng& rng, std::size_t max_len, int alphabet) {
  SymbolSequence s(rng() % (max_len + 1));
  for (auto& x : s) x = static_cast<Symbol>(rng() % static_cast<std::uint64_t>(alphabet));
  return s;
}

dsp::F0Track track(const std::vector<double>& hz) {
  dsp::F0Track t;
  t.f0_hz = Eigen::Map<const Vector>(hz.data(), static_cast<Eigen::Index>(hz.size()));
  for (double h : hz) t.voiced.push_back(h > 0.0);
  return t;
}

}  // namespace

TEST_CASE("CER examples") {
  const SymbolSequence ref{1, 2, 3, 4};
  CHECK(cer(ref, ref) == 0.0);
  CHECK(cer(ref, SymbolSequence{1, 2, 4}) == 0.25);
  CHECK(cer(ref, SymbolSequence{1, 9, 3, 4}) == 0.25);
  CHECK(cer(ref, SymbolSequence{}) == 1.0);
  CHECK(cer(ref, SymbolSequence{5, 5, 5, 5, 5, 5, 5, 5}) == 2.0);
  CHECK(code_of([] { cer(SymbolSequence{}, SymbolSequence{1}); }) == ErrorCode::EmptyReference);
}

TEST_CASE("edit distance matches the recursive definition") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_symbols(rng, 6, 4);
    const auto b = random_symbols(rng, 6, 4);
    const std::span<const Symbol> sa(a), sb(b);
    REQUIRE(edit_distance(sa, sb) == naive_edits(sa, sb));
    CHECK(edit_distance(sa, sb) == edit_distance(sb, sa));
  }
  for (int i = 0; i < 200; ++i) {
    const auto a = random_symbols(rng, 12, 3), b = random_symbols(rng, 12, 3), c = random_symbols(rng, 12, 3);
    const std::span<const Symbol> sa(a), sb(b), sc(c);
    CHECK(edit_distance(sa, sc) <= edit_distance(sa, sb) + edit_distance(sb, sc));
  }
}

TEST_CASE("DTW matches exhaustive search") {
  Rng rng(2);
  for (Eigen::Index n = 1; n <= 6; ++n) {
    for (Eigen::Index m = 1; m <= 6; ++m) {
      const Matrix a = randn(n, 2, rng), b = randn(m, 2, rng);
      const auto r = dtw_align(a, b);
      CHECK(r.cost == doctest::Approx(brute_dtw(a, b)).epsilon(1e-12));
      REQUIRE(r.path.front() == std::make_pair(Eigen::Index{0}, Eigen::Index{0}));
      REQUIRE(r.path.back() == std::make_pair(n - 1, m - 1));
      double along = 0.0;
      for (std::size_t k = 0; k < r.path.size(); ++k) {
        const auto [i, j] = r.path[k];
        along += (a.row(i) - b.row(j)).norm();
        if (k == 0) continue;
        const auto di = i - r.path[k - 1].first, dj = j - r.path[k - 1].second;
        CHECK((di == 0 || di == 1));
        CHECK((dj == 0 || dj == 1));
        CHECK(di + dj >= 1);
      }
      CHECK(along == doctest::Approx(r.cost).epsilon(1e-12));
    }
  }
  Matrix x(1, 3), xx(2, 3);
  x << 1, 2, 3;
  xx << 1, 2, 3, 1, 2, 3;
  CHECK(dtw_align(x, xx).cost == 0.0);
  CHECK(code_of([&] { dtw_align(Matrix(0, 3), xx); }) == ErrorCode::EmptyInput);
  CHECK(code_of([&] { dtw_align(x, Matrix::Zero(2, 2)); }) == ErrorCode::ShapeError);
}

TEST_CASE("MCD scale and symmetry") {
  Rng rng(3);
  dsp::McepSequence a{randn(30, 25, rng)};
  dsp::McepSequence b = a;
  CHECK(mcd(a, b) == 0.0);
  b.frames.col(5).array() += 1.0;
  b.frames.col(0).array() += 7.0;
  CHECK(mcd_along(a, b, diagonal_path(30)) == doctest::Approx(6.14185).epsilon(1e-6));
  CHECK(std::abs(mcd_along(a, b, diagonal_path(30)) - 10.0 / std::log(10.0) * std::sqrt(2.0)) < 1e-12);

  dsp::McepSequence c{randn(24, 25, rng)};
  CHECK(mcd(a, c) == doctest::Approx(mcd(c, a)).epsilon(1e-12));
  CHECK(mcd(a, c) > 0.0);
  CHECK(code_of([&] { mcd_along(a, c, {}); }) == ErrorCode::EmptyInput);
}

TEST_CASE("F0 metrics") {
  const auto a = track({100, 110, 0, 120, 130, 125, 0, 118});
  const auto path = diagonal_path(a.size());
  const auto same = f0_metrics(a, a, path);
  CHECK(same.rmse_cents == 0.0);
  CHECK(same.corr == doctest::Approx(1.0));
  CHECK(same.pairs == 6);

  auto octave = a;
  octave.f0_hz *= 2.0;
  const auto o = f0_metrics(a, octave, path);
  CHECK(o.rmse_cents == doctest::Approx(1200.0).epsilon(1e-12));
  CHECK(o.corr == doctest::Approx(1.0).epsilon(1e-12));

  Rng rng(4);
  std::vector<double> ha, hb;
  for (int i = 0; i < 40; ++i) {
    ha.push_back(100.0 + 50.0 * std::abs(randn(1, 1, rng)(0, 0)));
    hb.push_back(100.0 + 50.0 * std::abs(randn(1, 1, rng)(0, 0)));
  }
  const auto m = f0_metrics(track(ha), track(hb), diagonal_path(40));
  double mx = 0, my = 0;
  for (int i = 0; i < 40; ++i) {
    mx += std::log2(ha[i]) / 40.0;
    my += std::log2(hb[i]) / 40.0;
  }
  double sxy = 0, sxx = 0, syy = 0, se = 0;
  for (int i = 0; i < 40; ++i) {
    const double dx = std::log2(ha[i]) - mx, dy = std::log2(hb[i]) - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
    se += std::pow(1200.0 * (std::log2(ha[i]) - std::log2(hb[i])), 2);
  }
  CHECK(std::abs(m.corr - sxy / std::sqrt(sxx * syy)) < 1e-9);
  CHECK(std::abs(m.rmse_cents - std::sqrt(se / 40.0)) < 1e-9);

  auto scaled = track(hb);
  scaled.f0_hz *= 1.37;
  CHECK(f0_metrics(track(ha), scaled, diagonal_path(40)).corr == doctest::Approx(m.corr).epsilon(1e-12));

  const auto sparse = track({100, 0, 0, 0});
  CHECK(code_of([&] { f0_metrics(sparse, sparse, diagonal_path(4)); }) == ErrorCode::InsufficientVoicing);
  CHECK(code_of([&] { f0_metrics(sparse, a, diagonal_path(8)); }) == ErrorCode::ShapeError);
}

TEST_CASE("pearson edge cases") {
  const Vector x = Vector::LinSpaced(5, 0.0, 1.0);
  CHECK(pearson(x, x) == doctest::Approx(1.0));
  CHECK(pearson(x, Vector(-x)) == doctest::Approx(-1.0));
  CHECK(pearson(Vector::Constant(4, 2.0), Vector::Constant(4, 2.0)) == 1.0);
  CHECK(pearson(Vector::Constant(5, 2.0), x) == 0.0);
  CHECK(code_of([&] { pearson(x, Vector::Zero(3)); }) == ErrorCode::ShapeError);
}

TEST_CASE("report round trip and validation") {
  EvalReport rep;
  rep.rows.push_back({"S1", "BNF", "Mel", "None", 7.25, 31.5, 412.0, 0.41, 40});
  rep.rows.push_back({"S4", "BNF", "Units", "TTS/AE", 6.75, 24.0, 380.5, 0.47, 40});
  const auto back = EvalReport::from_json(rep.to_json());
  REQUIRE(back.rows.size() == 2);
  CHECK(back.to_json() == rep.to_json());
  CHECK(rep.to_json().at("f0_rmse_unit") == "cents");

  const auto dir = test::scratch_dir("report");
  rep.save(dir / "report.json");
  CHECK(EvalReport::load(dir / "report.json").to_json() == rep.to_json());
  CHECK(code_of([&] { EvalReport::load(dir / "missing.json"); }) == ErrorCode::IoError);

  const std::string table = rep.render_table();
  CHECK(table.find("S1") != std::string::npos);
  CHECK(table.find("TTS/AE") != std::string::npos);
  CHECK(table.find("24.0") != std::string::npos);
  CHECK(std::count(table.begin(), table.end(), '\n') == 4);

  for (const auto& r : rep.rows) CHECK_NOTHROW(validate_row(r));
  auto bad = rep.rows[0];
  bad.mcd_db = std::nan("");
  CHECK(code_of([&] { validate_row(bad); }) == ErrorCode::InvalidInput);
  bad = rep.rows[0];
  bad.f0_corr = 1.5;
  CHECK(code_of([&] { validate_row(bad); }) == ErrorCode::InvalidInput);
  bad = rep.rows[0];
  bad.cer_pct = -1.0;
  CHECK(code_of([&] { validate_row(bad); }) == ErrorCode::InvalidInput);
}
