// Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
// if any fails. Usage: acceptance WORK_DIR [--fast]
// --fast runs only the criteria that need no trained model (1-4).
//
// Criteria 5-7 train real models in WORK_DIR; expect roughly an hour on one
// core.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "atddpm/atddpm.hpp"
#include "test_util.hpp"

using namespace atddpm;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned budget for the end-to-end criteria.
struct Budget {
  std::size_t train_items = 4096;
  std::uint64_t train_seed = 1;
  std::size_t heldout_items = 256;
  std::uint64_t heldout_seed = 777;
  std::size_t weak_steps = 2000;
  std::size_t strong_steps = 4000;
  std::size_t batch_size = 8;
  std::string learning_rate = "5e-4";
  double train_limit_seconds = 1800;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

int failures = 0;

void report(int n, const std::string& what, const Outcome& o) {
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << what << "): " << o.detail << std::endl;
}

template <class F>
void run(int n, const std::string& what, F&& f) {
  try {
    report(n, what, f());
  } catch (const std::exception& e) {
    report(n, what, {false, std::string("exception: ") + e.what()});
  }
}

Outcome schedule_identities() {
  const auto t0 = Clock::now();
  const auto base = linear_schedule(1000, 1e-4, 0.02);
  const auto r60 = respace(base, 60);
  double prod = 1.0;
  for (std::size_t k = 1; k <= 60; ++k) prod *= 1.0 - r60.beta(k);
  const double prod_err = std::abs(prod - base.alpha_bar(1000));
  const auto full = respace(base, 1000);
  double beta_err = 0.0;
  for (std::size_t t = 1; t <= 1000; ++t) beta_err = std::max(beta_err, std::abs(full.beta(t) - base.beta(t)));
  const double secs = seconds_since(t0);
  return {prod_err <= 1e-12 && beta_err <= 1e-12 && secs < 1.0,
          "|prod(1-beta') - alpha_bar| = " + fmt("%.2e", prod_err) + ", max |beta'-beta| at K=T = " +
              fmt("%.2e", beta_err) + ", " + fmt("%.3f", secs) + " s"};
}

struct MomentCheck {
  double worst_mean_z = 0;    // |mean - expected| / (sd / sqrt(n)), worst pixel
  double worst_var_dev = 0;   // |var / expected - 1|, worst pixel
};

template <class Draw>
MomentCheck moments(const Tensor& y0, double alpha_bar, int n, Draw&& draw) {
  std::vector<double> m(y0.size(), 0.0), m2(y0.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    const Tensor y = draw();
    for (std::size_t p = 0; p < y0.size(); ++p) {
      m[p] += y[p];
      m2[p] += y[p] * y[p];
    }
  }
  MomentCheck c;
  const double sd = std::sqrt(1.0 - alpha_bar);
  for (std::size_t p = 0; p < y0.size(); ++p) {
    const double mean = m[p] / n;
    const double var = (m2[p] - n * mean * mean) / (n - 1);
    c.worst_mean_z = std::max(c.worst_mean_z, std::abs(mean - std::sqrt(alpha_bar) * y0[p]) / (sd / std::sqrt(n)));
    c.worst_var_dev = std::max(c.worst_var_dev, std::abs(var / (1.0 - alpha_bar) - 1.0));
  }
  return c;
}

Outcome forward_moments() {
  const auto t0 = Clock::now();
  const auto s = linear_schedule(1000, 1e-4, 0.02);
  constexpr std::size_t t = 500;
  constexpr int n = 10000;
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = -1.0 + 2.0 * static_cast<double>(i) / 15.0;
  const Tensor y0({4, 4}, v);
  const double ab = s.alpha_bar(t);

  Rng closed(11);
  const auto a = moments(y0, ab, n, [&] { return q_sample(y0, t, gauss(closed, y0.shape()), s); });
  Rng iter(12);
  const auto b = moments(y0, ab, n, [&] {
    Tensor y = y0;
    for (std::size_t k = 1; k <= t; ++k) y = q_step(y, k, gauss(iter, y0.shape()), s);
    return y;
  });
  const double secs = seconds_since(t0);
  const bool ok = a.worst_mean_z <= 4 && a.worst_var_dev <= 0.05 && b.worst_mean_z <= 4 && b.worst_var_dev <= 0.05;
  return {ok && secs < 30,
          "q_sample worst mean z " + fmt("%.2f", a.worst_mean_z) + ", var dev " + fmt("%.3f", a.worst_var_dev) +
              "; iterated q_step worst mean z " + fmt("%.2f", b.worst_mean_z) + ", var dev " +
              fmt("%.3f", b.worst_var_dev) + "; " + fmt("%.1f", secs) + " s"};
}

// Every parameter is perturbed off its initial value so that no gradient is
// masked by a zero or unit initialization.
void perturb_all(DenoiserParams& p, Rng& rng) {
  for (auto& nt : p.tensors()) {
    const double scale_by = nt.name.rfind("out.conv.", 0) == 0 ? 0.3 : 0.1;
    for (double& v : nt.value.mutable_data()) v += scale_by * rng.normal();
  }
}

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  Rng rng(21);
  const auto s = linear_schedule(1000, 1e-4, 0.02);
  double worst = 0.0;
  std::size_t checked = 0, total = 0;
  for (int trial = 0; trial < 20; ++trial) {
    DenoiserDescriptor d;
    d.groups = 1 + rng.below(2);
    for (auto& w : d.widths) w = d.groups * (1 + rng.below(3));
    d.image_size = rng.below(2) ? 8 : 4;
    d.time_dim = 2 * (1 + rng.below(4));
    d.kernel = rng.below(4) ? 3 : 1;
    d.validate();
    auto p = init_params(d, rng.split(static_cast<std::uint64_t>(trial)));
    perturb_all(p, rng);
    const Shape shape{2, 1, d.image_size, d.image_size};
    const Tensor y0 = gauss(rng, shape), x = gauss(rng, shape), eps = gauss(rng, shape);
    const std::vector<std::size_t> steps{1 + rng.below(1000), 1 + rng.below(1000)};
    std::vector<Tensor*> leaves;
    for (auto& nt : p.tensors()) leaves.push_back(&nt.value);
    const auto r = testing::check_gradients([&] { return loss_simple(p, y0, x, steps, eps, s); }, leaves, 1e-6);
    worst = std::max(worst, r.max_rel);
    checked += r.checked;
    total += p.parameter_count();
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-5 && checked == total && secs < 300,
          "20 models, " + std::to_string(checked) + " parameters, worst rel error " + fmt("%.2e", worst) + ", " +
              fmt("%.1f", secs) + " s"};
}

Outcome distillation_structure() {
  const auto t0 = Clock::now();
  const auto d = testing::tiny_descriptor(8);
  Rng rng(31);
  auto student = init_params(d, Rng(1)), teacher = init_params(d, Rng(2));
  perturb_all(student, rng);
  perturb_all(teacher, rng);
  const auto s = linear_schedule(1000, 1e-4, 0.02);
  const Shape shape{4, 1, 8, 8};
  const Tensor y0 = gauss(rng, shape), xs = gauss(rng, shape), xw = gauss(rng, shape), eps = gauss(rng, shape);
  const std::vector<std::size_t> steps{1, 250, 600, 1000};

  const auto zero = loss_final(student, teacher, y0, xs, xw, steps, eps, s, 0.0);
  const double l_simple = loss_simple(student, y0, xs, steps, eps, s).item();
  const bool exact = zero.total.item() == l_simple && zero.total.item() == zero.l_t && zero.l_s > 0.0;

  teacher.set_requires_grad(true);
  const auto full = loss_final(student, teacher, y0, xs, xw, steps, eps, s, 1.0);
  backward(full.total);
  std::size_t teacher_grads = 0, student_grads = 0;
  for (const auto& nt : teacher.tensors()) teacher_grads += nt.value.has_grad();
  for (const auto& nt : student.tensors()) student_grads += nt.value.has_grad();
  const bool no_teacher_grad = teacher_grads == 0 && student_grads == student.tensors().size();

  // A full-size model for the EMA identity.
  const DenoiserDescriptor big;
  const auto delta = init_params(big, Rng(3));
  auto phi = init_params(big, Rng(4));
  perturb_all(phi, rng);
  constexpr double g1 = 0.9909;
  const auto twice = ema_update(ema_update(phi, delta, g1), delta, g1);
  const auto once = ema_update(phi, delta, g1 * g1);
  double ema_err = 0.0;
  for (std::size_t i = 0; i < phi.tensors().size(); ++i) {
    for (std::size_t j = 0; j < phi.at(i).size(); ++j) ema_err = std::max(ema_err, std::abs(twice.at(i)[j] - once.at(i)[j]));
  }
  const double secs = seconds_since(t0);
  return {exact && no_teacher_grad && ema_err <= 1e-12 && secs < 10,
          std::string("gamma=0 ") + (exact ? "exact" : "MISMATCH") + ", teacher tensors with grad " +
              std::to_string(teacher_grads) + ", student " + std::to_string(student_grads) + "/" +
              std::to_string(student.tensors().size()) + ", EMA composition error " + fmt("%.2e", ema_err) + ", " +
              fmt("%.2f", secs) + " s"};
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double loss_drop(const std::vector<LossRecord>& h) {
  if (h.size() < 200) return 0.0;
  std::vector<double> first, last;
  for (std::size_t i = 0; i < 100; ++i) {
    first.push_back(h[i].l_t);
    last.push_back(h[h.size() - 100 + i].l_t);
  }
  return median_of(first) / median_of(last);
}

struct Trained {
  double train_seconds = 0;  // weak + strong stages of the progressive pipeline
  fs::path distilled, direct;
  PtAblation table;
};

Trained train_and_score(const fs::path& work, const Budget& b, std::ostream& log) {
  const auto data = work / "train", held = work / "heldout";
  cmd_gen_data({data, b.train_items, b.train_seed, std::nullopt}, log);
  cmd_gen_data({held, b.heldout_items, b.heldout_seed, std::nullopt}, log);

  ConfigMap flags;
  flags.set("learning_rate", b.learning_rate);
  flags.set("batch_size", std::to_string(b.batch_size));
  const auto train = [&](Stage stage, std::size_t steps, std::optional<fs::path> init, std::optional<fs::path> teacher,
                         const fs::path& out) {
    TrainOptions t;
    t.stage = stage;
    t.data = data;
    t.init = std::move(init);
    t.teacher = std::move(teacher);
    t.out = out;
    t.overrides = flags;
    t.overrides.set("steps", std::to_string(steps));
    const auto summary = cmd_train(t, log);
    log << "  median L_T first/last 100 steps: " << loss_drop(summary.history) << "x\n";
  };

  Trained r;
  r.distilled = work / "distilled.ckpt";
  r.direct = work / "direct.ckpt";
  const auto weak = work / "weak.ckpt";
  const auto t0 = Clock::now();
  train(Stage::WeakCond, b.weak_steps, std::nullopt, std::nullopt, weak);
  train(Stage::StrongDistill, b.strong_steps, weak, weak, r.distilled);
  r.train_seconds = seconds_since(t0);
  train(Stage::StrongDirect, b.weak_steps + b.strong_steps, std::nullopt, std::nullopt, r.direct);

  PtAblationOptions pt;
  pt.heldout = held;
  pt.out = work;
  pt.distilled_ckpt = r.distilled;
  pt.direct_ckpt = r.direct;
  r.table = cmd_ablate_pt(pt, log);
  return r;
}

Outcome end_to_end(const Trained& r, const Budget& b) {
  const auto& deg = r.table.degraded;
  const auto& res = r.table.distilled.report;
  std::size_t improved = 0;
  for (std::size_t i = 0; i < res.count(); ++i) improved += res.rows[i].psnr > deg.rows[i].psnr;
  const double frac = res.count() ? static_cast<double>(improved) / static_cast<double>(res.count()) : 0.0;
  const bool ok = res.count() == b.heldout_items && res.mean_psnr() > deg.mean_psnr() && frac >= 0.9 &&
                  r.train_seconds <= b.train_limit_seconds;
  return {ok, "mean PSNR restored " + fmt("%.3f", res.mean_psnr()) + " dB vs degraded " + fmt("%.3f", deg.mean_psnr()) +
                  " dB, " + std::to_string(improved) + "/" + std::to_string(res.count()) + " items improve (" +
                  fmt("%.1f", 100 * frac) + "%), training " + fmt("%.0f", r.train_seconds) + " s for " +
                  std::to_string(b.weak_steps) + "+" + std::to_string(b.strong_steps) + " steps"};
}

Outcome efficient_sampling(const Trained& r, const fs::path& work) {
  SamplingAblationOptions o;
  o.ckpt = r.distilled;
  o.heldout = work / "heldout";
  o.out_csv = work / "sampling_ablation.csv";
  std::ostringstream log;
  const auto a = cmd_ablate_sampling(o, log);
  std::cerr << log.str();

  const SamplingRow* at30 = nullptr;
  for (const auto& row : a.rows) {
    if (row.t1 == 30) at30 = &row;
  }
  if (!at30) return {false, "no t1=30 row"};
  const bool nfe_ok = std::all_of(at30->item_nfe.begin(), at30->item_nfe.end(), [](std::size_t n) { return n == 30; }) &&
                      !at30->item_nfe.empty() && a.noise_start_nfe == 60;
  const double ratio = at30->runtime_seconds / a.noise_start_runtime_seconds;

  // Rows come in increasing t1. A violation is an item whose distance at the
  // smaller t1 of an adjacent pair exceeds its distance at the larger one.
  bool mean_monotone = true;
  std::size_t violations = 0, comparisons = 0, items_with_any = 0;
  const auto n_items = a.rows.front().item_distance.size();
  for (std::size_t k = 0; k + 1 < a.rows.size(); ++k) {
    mean_monotone = mean_monotone && a.rows[k].mean_distance <= a.rows[k + 1].mean_distance;
  }
  for (std::size_t i = 0; i < n_items; ++i) {
    bool any = false;
    for (std::size_t k = 0; k + 1 < a.rows.size(); ++k) {
      const bool v = a.rows[k].item_distance[i] > a.rows[k + 1].item_distance[i];
      violations += v;
      any = any || v;
      ++comparisons;
    }
    items_with_any += any;
  }
  const double vfrac = comparisons ? static_cast<double>(violations) / static_cast<double>(comparisons) : 1.0;
  std::string dists;
  for (const auto& row : a.rows) dists += (dists.empty() ? "" : " ") + std::to_string(row.t1) + ":" + fmt("%.4g", row.mean_distance);
  const bool ok = nfe_ok && ratio >= 0.35 && ratio <= 0.65 && mean_monotone && vfrac <= 0.10;
  return {ok, std::string("nfe at t1=30 ") + (nfe_ok ? "30 for every item" : "WRONG") + ", runtime ratio " +
                  fmt("%.3f", ratio) + ", mean distance " + dists + (mean_monotone ? " (monotone)" : " (NOT monotone)") +
                  ", violations " + std::to_string(violations) + "/" + std::to_string(comparisons) + " pairs (" +
                  fmt("%.1f", 100 * vfrac) + "%), " + std::to_string(items_with_any) + "/" + std::to_string(n_items) +
                  " items with any"};
}

Outcome progressive_ablation(const Trained& r, const fs::path& work) {
  const auto& t = r.table;
  const double a = t.distilled.report.mean_psnr(), b = t.direct.report.mean_psnr();
  const bool table = fs::exists(work / "pt_ablation.csv") && fs::file_size(work / "pt_ablation.csv") > 0;
  const bool equal_steps = t.distilled.total_steps == t.direct.total_steps && t.direct.total_steps > 0;
  return {table && equal_steps && a >= b - 0.1,
          "distilled " + fmt("%.3f", a) + " dB vs direct " + fmt("%.3f", b) + " dB at " +
              std::to_string(t.distilled.total_steps) + "/" + std::to_string(t.direct.total_steps) +
              " total steps, table " + (table ? (work / "pt_ablation.csv").string() : std::string("MISSING"))};
}

bool same_bytes(const fs::path& a, const fs::path& b) { return read_file(a) == read_file(b); }

Outcome round_trips(const Trained& r, const fs::path& work, const Budget& b) {
  // checkpoint
  const Checkpoint c = load_checkpoint(r.distilled);
  const auto copy = work / "roundtrip.ckpt";
  save_checkpoint(copy, c);
  const Checkpoint back = load_checkpoint(copy);
  bool params_equal = back.header == c.header && back.student.tensors().size() == c.student.tensors().size() &&
                      back.teacher.has_value() == c.teacher.has_value();
  for (std::size_t i = 0; params_equal && i < c.student.tensors().size(); ++i) {
    const auto x = c.student.at(i).data(), y = back.student.at(i).data();
    params_equal = std::equal(x.begin(), x.end(), y.begin(), y.end());
  }
  const bool ckpt_ok = params_equal && same_bytes(r.distilled, copy);

  // PGM
  Rng rng(81);
  double pgm_err = 0.0;
  const auto pgm = work / "roundtrip.pgm";
  for (int i = 0; i < 200; ++i) {
    Tensor img = uniform(rng, {32, 32}, 0.0, 1.0);
    img.mutable_data()[0] = 0.0;
    img.mutable_data()[1] = 1.0;
    write_pgm(pgm, img);
    const Tensor got = read_pgm(pgm);
    for (std::size_t j = 0; j < img.size(); ++j) pgm_err = std::max(pgm_err, std::abs(got[j] - img[j]));
  }
  const bool pgm_ok = pgm_err <= 1.0 / 131070.0;

  // dataset regeneration
  const auto again = work / "heldout_again";
  fs::remove_all(again);
  std::ostringstream quiet;
  cmd_gen_data({again, b.heldout_items, b.heldout_seed, std::nullopt}, quiet);
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(work / "heldout")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto other = again / fs::relative(e.path(), work / "heldout");
    differing += !fs::exists(other) || !same_bytes(e.path(), other);
  }
  const bool data_ok = files > 0 && differing == 0;
  return {ckpt_ok && pgm_ok && data_ok, std::string("checkpoint ") + (ckpt_ok ? "bitwise equal" : "DIFFERS") +
                                            ", PGM max error " + fmt("%.3e", pgm_err) + " (bound " +
                                            fmt("%.3e", 1.0 / 131070.0) + "), gen-data rerun " +
                                            std::to_string(files - differing) + "/" + std::to_string(files) +
                                            " files identical"};
}

// Not a criterion: the same distilled model sampled with the posterior
// variance instead of beta'.
std::string variance_note(const Trained& r, const fs::path& work) {
  const Checkpoint c = load_checkpoint(r.distilled);
  const auto s = respace(schedule_from_header(c.header), 60);
  const HeldOut h = load_heldout(work / "heldout");
  RestoreOptions ro;
  ro.variance = ReverseVariance::Posterior;
  const auto run = score_restoration(c.student, s, h, 30, 0, ro);
  const auto& deg = r.table.degraded;
  std::size_t improved = 0;
  for (std::size_t i = 0; i < run.report.count(); ++i) improved += run.report.rows[i].psnr > deg.rows[i].psnr;
  return "note: posterior-variance sampling of the distilled model: mean PSNR " + fmt("%.3f", run.report.mean_psnr()) +
         " dB, " + std::to_string(improved) + "/" + std::to_string(run.report.count()) + " items improve";
}

}  // namespace

int main(int argc, char** argv) {
  const bool fast = argc == 3 && std::string(argv[2]) == "--fast";
  if (argc != 2 && !fast) {
    std::cerr << "usage: acceptance WORK_DIR [--fast]\n";
    return 1;
  }
  tune_allocator();
  const fs::path work = argv[1];
  fs::remove_all(work);
  fs::create_directories(work);
  const Budget budget;

  run(1, "schedule identities", schedule_identities);
  run(2, "forward-process moments", forward_moments);
  run(3, "gradient oracle", gradient_oracle);
  run(4, "distillation structure", distillation_structure);

  if (fast) {
    std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("criteria 1-4 passed")) << std::endl;
    return failures ? 1 : 0;
  }

  std::optional<Trained> trained;
  try {
    trained = train_and_score(work, budget, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "training pipeline failed: " << e.what() << "\n";
  }
  const auto need = [&](auto&& f) {
    return [&, f] {
      if (!trained) return Outcome{false, "training pipeline failed"};
      return f(*trained);
    };
  };
  run(5, "end-to-end restoration", need([&](const Trained& r) { return end_to_end(r, budget); }));
  run(6, "efficient sampling", need([&](const Trained& r) { return efficient_sampling(r, work); }));
  run(7, "progressive-training ablation", need([&](const Trained& r) { return progressive_ablation(r, work); }));
  run(8, "format round-trips", need([&](const Trained& r) { return round_trips(r, work, budget); }));
  if (trained) {
    try {
      std::cout << variance_note(*trained, work) << std::endl;
    } catch (const std::exception& e) {
      std::cerr << "variance comparison failed: " << e.what() << "\n";
    }
  }

  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failures ? 1 : 0;
}
