#include <dsmpc/cli.hpp>

#include <CLI11.hpp>

int main(int argc, char** argv) {
  using namespace dsmpc::cli;

  CLI::App app{"Distributed stochastic output-feedback MPC toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Synthesize K, L, P and the terminal set");
  s->add_option("--config", synth.config, "System config JSON")->required()->check(CLI::ExistingFile);
  s->add_option("--mode", synth.mode, "distributed or central")
      ->check(CLI::IsMember({"distributed", "central"}));
  s->add_option("-o,--out", synth.out, "Gains file (stdout when omitted)");
  s->add_flag("--timestamps", synth.timestamps, "Record a UTC timestamp in the manifest");

  PrsArgs prs;
  auto* p = app.add_subcommand("prs", "Error covariance, PRS half-widths and tightened sets");
  p->add_option("--config", prs.config, "System config JSON")->required()->check(CLI::ExistingFile);
  p->add_option("--gains", prs.gains, "Gains file")->required()->check(CLI::ExistingFile);
  p->add_option("--compare", prs.compare_gains, "Second gains file for the volume ratio")
      ->check(CLI::ExistingFile);
  p->add_option("--quantile", prs.quantile, "gaussian or chebyshev")
      ->check(CLI::IsMember({"gaussian", "chebyshev"}));
  p->add_option("-o,--out", prs.out, "PRS report (stdout when omitted)");
  p->add_flag("--timestamps", prs.timestamps, "Record a UTC timestamp in the manifest");

  StepArgs step;
  auto* st = app.add_subcommand("step", "Solve one MPC problem at a state estimate");
  st->add_option("--config", step.config, "System config JSON")->required()->check(CLI::ExistingFile);
  st->add_option("--gains", step.gains, "Gains file")->required()->check(CLI::ExistingFile);
  st->add_option("--prs", step.prs, "PRS report (computed from the gains when omitted)")
      ->check(CLI::ExistingFile);
  st->add_option("--quantile", step.quantile, "gaussian or chebyshev")
      ->check(CLI::IsMember({"gaussian", "chebyshev"}));
  st->add_option("--x-hat", step.x_hat, "Comma-separated state estimate (default scenario x0)");
  st->add_option("--horizon", step.horizon, "Prediction horizon")->check(CLI::PositiveNumber);
  st->add_option("--solver", step.solver, "admm or central")
      ->check(CLI::IsMember({"admm", "central"}));
  st->add_option("-o,--out", step.out, "Solution JSON (stdout when omitted)");
  st->add_flag("--timestamps", step.timestamps, "Record a UTC timestamp in the manifest");

  MonteCarloArgs mc;
  auto* m = app.add_subcommand("montecarlo", "Closed-loop Monte-Carlo study");
  m->add_option("--config", mc.config, "System config JSON")->required()->check(CLI::ExistingFile);
  m->add_option("--gains", mc.gains, "Gains file")->required()->check(CLI::ExistingFile);
  m->add_option("--prs", mc.prs, "PRS report (computed from the gains when omitted)")
      ->check(CLI::ExistingFile);
  m->add_option("--quantile", mc.quantile, "gaussian or chebyshev")
      ->check(CLI::IsMember({"gaussian", "chebyshev"}));
  m->add_option("--x0", mc.x0, "Comma-separated initial state (default scenario x0)");
  m->add_option("--horizon", mc.horizon, "Prediction horizon")->check(CLI::PositiveNumber);
  m->add_option("--runs", mc.runs, "Number of runs")->check(CLI::PositiveNumber);
  m->add_option("--steps", mc.steps, "Closed-loop steps per run")->check(CLI::PositiveNumber);
  m->add_option("--seed", mc.seed, "Master seed (DSMPC_SEED overrides)");
  m->add_option("--solver", mc.solver, "admm or central")
      ->check(CLI::IsMember({"admm", "central"}));
  m->add_option("--threads", mc.threads, "Worker threads (0: all cores)")
      ->check(CLI::NonNegativeNumber);
  m->add_option("-o,--out", mc.out, "Statistics JSON");
  m->add_option("--traj", mc.traj, "Trajectory CSV");
  m->add_flag("--timestamps", mc.timestamps, "Record a UTC timestamp in the manifest");

  CompareArgs cmp;
  auto* c = app.add_subcommand("compare", "Side-by-side table of two statistics files");
  c->add_option("a", cmp.a, "First stats.json")->required()->check(CLI::ExistingFile);
  c->add_option("b", cmp.b, "Second stats.json")->required()->check(CLI::ExistingFile);
  c->add_option("-o,--out", cmp.out, "Comparison JSON");

  BoundArgs bound;
  auto* b = app.add_subcommand("bound", "Average-cost bound diagnostic");
  b->add_option("--config", bound.config, "System config JSON")->required()->check(CLI::ExistingFile);
  b->add_option("--gains", bound.gains, "Gains file")->required()->check(CLI::ExistingFile);
  b->add_option("--prs", bound.prs, "PRS report (computed from the gains when omitted)")
      ->check(CLI::ExistingFile);
  b->add_option("--quantile", bound.quantile, "gaussian or chebyshev")
      ->check(CLI::IsMember({"gaussian", "chebyshev"}));
  b->add_option("--horizon", bound.horizon, "Prediction horizon")->check(CLI::PositiveNumber);
  b->add_option("--samples", bound.samples, "Lipschitz sample pairs")->check(CLI::PositiveNumber);
  b->add_option("--seed", bound.seed, "Sampling seed (DSMPC_SEED overrides)");
  b->add_option("--half-width", bound.half_width, "Sampling box half-width")
      ->check(CLI::PositiveNumber);
  b->add_option("-o,--out", bound.out, "Bound JSON (stdout when omitted)");
  b->add_flag("--timestamps", bound.timestamps, "Record a UTC timestamp in the manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  return guarded([&] {
    if (*s) return cmd_synth(synth);
    if (*p) return cmd_prs(prs);
    if (*st) return cmd_step(step);
    if (*m) return cmd_montecarlo(mc);
    if (*c) return cmd_compare(cmp);
    return cmd_bound(bound);
  });
}
