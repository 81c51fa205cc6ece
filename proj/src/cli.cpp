#include "cotvla/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include "cotvla/attention_viz.hpp"
#include "cotvla/data_model.hpp"
#include "cotvla/error.hpp"
#include "cotvla/model.hpp"
#include "cotvla/run_config.hpp"
#include "cotvla/simenv.hpp"
#include "cotvla/teacher.hpp"
#include "cotvla/trainer.hpp"

namespace cotvla::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("io", "cannot create " + dir.string() + ": " + ec.message());
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("io", "cannot write " + path.string());
  out << text;
  if (!out) throw Error("io", "short write to " + path.string());
}

const std::string& required(const RunConfig& cfg, std::string_view key) {
  const std::string& v = cfg.text(key);
  if (v.empty()) throw Error("config", flag_for(key) + " is required");
  return v;
}

fs::path vocab_path(const RunConfig& cfg) {
  if (!cfg.text("vocab").empty()) return cfg.text("vocab");
  return fs::path(required(cfg, "ckpt")).parent_path() / "vocab.json";
}

Vocabulary load_vocabulary(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open vocabulary " + path.string());
  try {
    return Vocabulary::from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error("vocab", path.string() + ": " + e.what());
  }
}

std::vector<Episode> load_with_traces(const RunConfig& cfg, const std::string& data, bool need_traces,
                                      std::ostream& out) {
  std::vector<Episode> eps = load_episodes(data);
  if (!need_traces) return eps;
  // Files that already embed every trace are used as-is.
  if (std::ranges::all_of(eps, [](const Episode& e) { return e.enriched(); })) return eps;
  AttachResult r = attach_traces(eps, required(cfg, "traces"), AttachOptions{cfg.flag("skip_unparsed")});
  if (!r.skipped_episode_ids.empty()) {
    out << "skipped " << r.skipped_episode_ids.size() << " episodes with unparsed traces\n";
  }
  return std::move(r.episodes);
}

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  const auto families = sim::parse_families(cfg.text("families"));
  sim::DemoOptions opts;
  opts.size = static_cast<int>(cfg.integer("grid"));
  opts.views = static_cast<int>(cfg.integer("views"));
  opts.max_steps = static_cast<int>(cfg.integer("max_steps"));
  const int n = static_cast<int>(cfg.integer("n"));
  if (n < 1) throw Error("config", "--n must be >= 1");
  const std::vector<Episode> eps = sim::generate_demonstrations(n, families, cfg.u64("seed"), opts);
  const fs::path dir = cfg.text("out");
  ensure_dir(dir);
  save_episodes(dir / "episodes.jsonl", eps);
  std::size_t steps = 0;
  std::map<std::string, int> per_task;
  for (const Episode& e : eps) {
    steps += e.steps.size();
    ++per_task[e.task_name];
  }
  json stats{{"episodes", eps.size()},
             {"steps", steps},
             {"mean_length", eps.empty() ? 0.0 : static_cast<double>(steps) / static_cast<double>(eps.size())},
             {"per_task", per_task},
             {"seed", cfg.u64("seed")}};
  write_file(dir / "stats.json", stats.dump(1) + "\n");
  out << stats.dump() << "\n";
  return 0;
}

int cmd_annotate(const RunConfig& cfg, std::ostream& out) {
  const std::vector<Episode> eps = load_episodes(required(cfg, "data"));
  std::unique_ptr<teacher::TeacherBackend> backend;
  const std::string& kind = cfg.text("teacher");
  if (kind == "rule") {
    backend = std::make_unique<teacher::RuleBasedTeacher>();
  } else if (kind == "remote") {
    backend = std::make_unique<teacher::RemoteTeacher>(teacher::RemoteTeacherConfig::from_env());
  } else {
    throw Error("config", "--teacher must be rule or remote, got '" + kind + "'");
  }
  const int workers = static_cast<int>(cfg.integer("workers"));
  const teacher::AnnotationReport report = teacher::annotate_dataset(*backend, eps, cfg.text("out"), workers);
  write_file(fs::path(cfg.text("out")) / "report.json", report.to_json().dump(1) + "\n");
  out << report.to_json().dump() << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const TrainConfig tc = cfg.train_config();
  const bool traces = tc.lambda_r > 0.0;
  const std::vector<Episode> train_set = load_with_traces(cfg, required(cfg, "data"), traces, out);
  std::vector<Episode> eval_set;
  if (!cfg.text("eval_data").empty()) eval_set = load_with_traces(cfg, cfg.text("eval_data"), traces, out);
  const Vocabulary vocab = build_vocabulary(train_set, static_cast<int>(cfg.integer("bins")));
  PolicyModel<float> model(cfg.model_config(vocab.size()));
  const TrainResult r = train(model, vocab, train_set, tc, eval_set);
  json summary{{"steps", r.steps},
               {"early_stopped", r.early_stopped},
               {"metrics", r.metrics_path.string()},
               {"checkpoint", r.final_checkpoint.string()},
               {"initial_loss_total", r.losses.front().loss_total},
               {"final_loss_total", r.losses.back().loss_total}};
  if (!r.evals.empty()) summary["final_eval"] = r.evals.back().result.metrics.to_json();
  out << summary.dump() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const Vocabulary vocab = load_vocabulary(vocab_path(cfg));
  const PolicyModel<float> model = load_checkpoint(required(cfg, "ckpt"), vocab);
  const TrainConfig tc = cfg.train_config();
  const std::vector<Episode> eps = load_with_traces(cfg, required(cfg, "data"), tc.lambda_r > 0.0, out);
  const EvalResult r = evaluate_offline(model, vocab, eps, tc);
  json j = r.metrics.to_json();
  j["loss_total"] = r.loss.loss_total;
  j["loss_action"] = r.loss.loss_action;
  j["loss_reasoning"] = r.loss.loss_reasoning;
  j["samples_action_tokens"] = r.loss.n_action_tokens;
  out << j.dump() << "\n";
  if (cfg.source("out") != "default") write_file(fs::path(cfg.text("out")) / "eval.json", j.dump(1) + "\n");
  return 0;
}

sim::Policy policy_for(const RunConfig& cfg) {
  const std::string& kind = cfg.text("policy");
  if (kind == "model") {
    Vocabulary vocab = load_vocabulary(vocab_path(cfg));
    auto model = std::make_shared<const PolicyModel<float>>(load_checkpoint(required(cfg, "ckpt"), vocab));
    return make_policy(model, std::move(vocab), PolicyOptions{static_cast<int>(cfg.integer("reasoning_budget"))});
  }
  if (kind == "expert") {
    return [](const Observation& obs) {
      auto [world, task] = sim::perceive(obs.images.front(), obs.instruction);
      return sim::scripted_expert(world, task);
    };
  }
  if (kind == "random") {
    auto rng = std::make_shared<std::mt19937_64>(cfg.u64("seed"));
    return [rng](const Observation&) {
      std::array<double, kActionDims> a{};
      for (std::size_t d = 0; d + 1 < kActionDims; ++d) a[d] = static_cast<double>((*rng)() >> 11) * 0x1.0p-52 - 1.0;
      a[kActionDims - 1] = static_cast<double>((*rng)() % 3) - 1.0;
      for (double& v : a) v = std::clamp(v, -1.0, 1.0);
      return ContinuousAction(a);
    };
  }
  if (kind == "zero") return [](const Observation&) { return ContinuousAction::hold(); };
  throw Error("config", "--policy must be model, expert, random or zero, got '" + kind + "'");
}

int cmd_rollout(const RunConfig& cfg, std::ostream& out) {
  const sim::Policy policy = policy_for(cfg);
  json all = json::array();
  for (sim::TaskFamily f : sim::parse_families(cfg.text("families"))) {
    const sim::RolloutSummary s =
        sim::rollout(policy, f, static_cast<int>(cfg.integer("n_episodes")), cfg.u64("seed"),
                     static_cast<int>(cfg.integer("max_steps")), static_cast<int>(cfg.integer("grid")),
                     static_cast<int>(cfg.integer("views")));
    out << s.to_json().dump() << "\n";
    all.push_back(s.to_json());
  }
  if (cfg.source("out") != "default") write_file(fs::path(cfg.text("out")) / "rollout.json", all.dump(1) + "\n");
  return 0;
}

int cmd_viz_attn(const RunConfig& cfg, std::ostream& out) {
  const Vocabulary vocab = load_vocabulary(vocab_path(cfg));
  const PolicyModel<float> model = load_checkpoint(required(cfg, "ckpt"), vocab);
  const std::vector<Episode> eps = load_episodes(required(cfg, "data"));
  const std::string& id = cfg.text("episode");
  auto it = std::find_if(eps.begin(), eps.end(), [&](const Episode& e) { return e.episode_id == id; });
  if (it == eps.end()) throw Error("data", "episode '" + id + "' not found");
  const long long step = cfg.integer("step");
  if (step < 0 || step >= static_cast<long long>(it->steps.size())) {
    throw Error("data", "episode '" + id + "' has no step " + std::to_string(step));
  }
  const Observation& obs = it->steps[static_cast<std::size_t>(step)].observation;
  AttentionRecord record;
  const PolicyDecode dec =
      decode_policy_step(model, vocab, obs, PolicyOptions{static_cast<int>(cfg.integer("reasoning_budget"))}, &record);
  tag_generated_segments(record, vocab);
  const int prompt_len = static_cast<int>(record.input_ids.size() - dec.tokens.size());
  std::vector<int> targets;
  for (std::size_t i = 0; i < dec.tokens.size(); ++i) {
    if (vocab.is_action(dec.tokens[i])) targets.push_back(prompt_len + static_cast<int>(i) - 1);
  }
  const int k = static_cast<int>(cfg.integer("k"));
  const auto maps = fuse_attention_map(record, targets, k, parse_method(cfg.text("method")));
  const fs::path dir = cfg.text("out");
  ensure_dir(dir);
  json summary = json::array();
  for (std::size_t a = 0; a < maps.size(); ++a) {
    for (std::size_t v = 0; v < maps[a].views.size(); ++v) {
      std::string stem = "attn_" + id + "_s" + std::to_string(step) + "_a" + std::to_string(a);
      if (maps[a].views.size() > 1) stem += "_v" + std::to_string(v);
      export_heatmap(maps[a], obs.images[v], dir / stem, static_cast<int>(v));
    }
    const auto [r, c] = argmax_cell(maps[a]);
    summary.push_back({{"action_slot", a}, {"target", maps[a].target}, {"peak_row", r}, {"peak_col", c},
                       {"flat", maps[a].flat}});
  }
  std::string text;
  for (int t : dec.tokens) text += vocab.token_text(t) + " ";
  out << "decoded: " << text << "\n" << summary.dump() << "\n";
  return 0;
}

std::string polyline(const std::vector<double>& ys, double x0, double y0, double w, double h, double lo, double hi,
                     const char* color) {
  std::ostringstream s;
  s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    if (std::isnan(ys[i])) continue;
    const double x = x0 + (ys.size() > 1 ? w * static_cast<double>(i) / static_cast<double>(ys.size() - 1) : 0.0);
    const double y = y0 + h - h * (ys[i] - lo) / span;
    s << x << "," << y << " ";
  }
  s << "\"/>\n";
  return s.str();
}

int cmd_plot(const RunConfig& cfg, std::ostream& out) {
  const fs::path metrics = required(cfg, "metrics");
  std::ifstream in(metrics);
  if (!in) throw Error("io", "cannot open " + metrics.string());
  const std::vector<std::string> keys = {"loss_total", "loss_action", "loss_reasoning", "action_accuracy",
                                         "reasoning_accuracy", "action_l1"};
  std::map<std::string, std::vector<double>> series;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("parse", metrics.string() + " line " + std::to_string(n) + ": " + e.what());
    }
    for (const auto& k : keys) {
      series[k].push_back(j.contains(k) && j[k].is_number() ? j[k].get<double>() : std::nan(""));
    }
  }
  if (series.empty()) throw Error("data", metrics.string() + " has no metric lines");
  auto range = [&](std::initializer_list<const char*> names) {
    double lo = 0.0;
    double hi = 0.0;
    for (const char* nm : names) {
      for (double v : series[nm]) {
        if (!std::isnan(v)) hi = std::max(hi, v);
      }
    }
    return std::pair{lo, hi};
  };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"900\" height=\"360\" font-family=\"sans-serif\" "
         "font-size=\"12\">\n<rect width=\"900\" height=\"360\" fill=\"white\"/>\n";
  const auto [llo, lhi] = range({"loss_total", "loss_action", "loss_reasoning"});
  svg << "<text x=\"40\" y=\"20\">loss (total black, action red, reasoning blue); max " << lhi << "</text>\n";
  svg << "<rect x=\"40\" y=\"30\" width=\"380\" height=\"300\" fill=\"none\" stroke=\"#888\"/>\n";
  svg << polyline(series["loss_total"], 40, 30, 380, 300, llo, lhi, "black");
  svg << polyline(series["loss_action"], 40, 30, 380, 300, llo, lhi, "red");
  svg << polyline(series["loss_reasoning"], 40, 30, 380, 300, llo, lhi, "blue");
  svg << "<text x=\"480\" y=\"20\">accuracy in [0, 1] (action red, reasoning blue)</text>\n";
  svg << "<rect x=\"480\" y=\"30\" width=\"380\" height=\"300\" fill=\"none\" stroke=\"#888\"/>\n";
  svg << polyline(series["action_accuracy"], 480, 30, 380, 300, 0.0, 1.0, "red");
  svg << polyline(series["reasoning_accuracy"], 480, 30, 380, 300, 0.0, 1.0, "blue");
  svg << "</svg>\n";
  fs::path target = cfg.text("out");
  if (target.extension() != ".svg") target /= "metrics.svg";
  write_file(target, svg.str());
  out << "wrote " << target.string() << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reasoning-augmented robot policy toolkit: data, annotation, training, rollout and attention maps",
               "cotvla"};
  app.require_subcommand(1);
  std::map<std::string, std::string> given;
  std::map<std::string, CLI::Option*> options;
  for (const ConfigKey& c : config_schema()) {
    options[c.key] = app.add_option(flag_for(c.key), given[c.key], c.help)->default_str(c.default_value);
  }
  struct Sub {
    const char* name;
    const char* help;
    int (*fn)(const RunConfig&, std::ostream&);
  };
  const Sub subs[] = {
      {"gen-data", "generate expert demonstrations", cmd_gen_data},
      {"annotate", "attach teacher reasoning traces to every step", cmd_annotate},
      {"train", "fine-tune on actions plus reasoning", cmd_train},
      {"eval", "teacher-forced metrics of a checkpoint", cmd_eval},
      {"rollout", "closed-loop success and grasp rates", cmd_rollout},
      {"viz-attn", "top-k fused attention heatmaps for the action tokens", cmd_viz_attn},
      {"plot", "SVG of the curves in metrics.jsonl", cmd_plot},
  };
  for (const Sub& s : subs) app.add_subcommand(s.name, s.help)->fallthrough();

  std::vector<std::string> storage{"cotvla"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (std::string& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: code=usage msg=" << msg << "\n";
    return 2;
  }

  try {
    RunConfig cfg;
    if (options["config"]->count() > 0) cfg.load_file(given["config"]);
    for (const ConfigKey& c : config_schema()) {
      if (c.key != "config" && options[c.key]->count() > 0) cfg.set(c.key, given[c.key], "flag");
    }
    if (options["config"]->count() > 0) cfg.set("config", given["config"], "flag");
    for (const Sub& s : subs) {
      CLI::App* sub = app.get_subcommand(s.name);
      if (!sub->parsed()) continue;
      out << "# " << s.name << " resolved configuration\n" << cfg.describe();
      out.flush();
      return s.fn(cfg, out);
    }
    err << "error: code=usage msg=no subcommand\n";
    return 2;
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: code=" << e.code() << " msg=" << msg << "\n";
    return e.code() == "config" ? 2 : 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: code=internal msg=" << msg << "\n";
    return 1;
  }
}

}  // namespace cotvla::cli
