// advex command-line front end. Every command prints one JSON object to
// stdout on success; failures print {"error": ...} to stderr and exit 1.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "advex/annotation.hpp"
#include "advex/attack.hpp"
#include "advex/data.hpp"
#include "advex/error.hpp"
#include "advex/metrics.hpp"
#include "advex/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace advex;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

// Sets of attack flags shared by attack, explain, ara and serve.
struct AttackFlags {
  int steps = 450;
  double eta = 0.55;
  double lr = 0.01;
  double momentum = 0.9;

  void add(CLI::App* app) {
    app->add_option("--steps", steps, "Attack iterations N")->capture_default_str();
    app->add_option("--eta", eta, "Normalized classification step length")->capture_default_str();
    app->add_option("--attack-lr", lr, "Perturbation optimizer learning rate")->capture_default_str();
    app->add_option("--attack-momentum", momentum, "Perturbation optimizer momentum")->capture_default_str();
  }
  AttackConfig config() const {
    AttackConfig c;
    c.steps = steps;
    c.eta = eta;
    c.lr = lr;
    c.momentum = momentum;
    return c;
  }
};

std::size_t find_example(const Dataset& ds, int index, const std::string& id) {
  if (!id.empty()) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.examples[i].id == id) return i;
    }
    throw ConfigError("no example with id " + id);
  }
  if (index < 0 || std::size_t(index) >= ds.size()) throw ConfigError("example index out of range");
  return std::size_t(index);
}

json outcome_json(const AttackOutcome& o) {
  json j{{"success", o.success},
         {"rmse", o.success ? json(o.rmse) : json(nullptr)},
         {"l2", o.success ? json(o.m_best) : json(nullptr)},
         {"first_success_step", o.first_success_step ? json(*o.first_success_step) : json(nullptr)},
         {"prediction", o.final_prediction}};
  return j;
}

HttpServer* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advex: robustness training, attacks and evaluation"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;

  // gen-data ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate or import a dataset");
  std::string gen_kind = "blobs", gen_out;
  std::size_t gen_classes = 3, gen_per_class = 300;
  double gen_spread = 0.06, gen_noise = 0.1;
  std::vector<std::string> cifar_files;
  gen->add_option("--kind", gen_kind, "blobs | digits | cifar")->check(CLI::IsMember({"blobs", "digits", "cifar"}));
  gen->add_option("--classes", gen_classes, "Class count (blobs, digits)")->capture_default_str();
  gen->add_option("--per-class", gen_per_class, "Examples per class")->capture_default_str();
  gen->add_option("--spread", gen_spread, "Blob standard deviation")->capture_default_str();
  gen->add_option("--noise", gen_noise, "Digit pixel noise")->capture_default_str();
  gen->add_option("--cifar", cifar_files, "CIFAR-10 binary batch files");
  gen->add_option("--out", gen_out, "Dataset directory")->required();
  gen->add_option("--seed", seed, "Random seed");

  // train ------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train a network");
  std::string tr_data, tr_config, tr_out;
  std::optional<int> tr_epochs;
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--config", tr_config, "Training config (JSON)");
  tr->add_option("--epochs", tr_epochs, "Override the configured epoch count");
  tr->add_option("--out", tr_out, "Checkpoint directory")->required();
  auto* tr_seed = tr->add_option("--seed", seed, "Random seed (overrides the config)");

  // attack / explain -------------------------------------------------------
  auto* at = app.add_subcommand("attack", "Minimal attack on one example");
  auto* ex = app.add_subcommand("explain", "Adversarial explanation of one example");
  std::string at_ckpt, at_data, at_id, at_out, at_goal = "adv";
  int at_index = 0;
  double at_rho = 0.1, at_margin = 0.5;
  std::optional<std::size_t> at_target;
  AttackFlags at_flags;
  for (auto* c : {at, ex}) {
    c->add_option("--checkpoint", at_ckpt, "Checkpoint directory")->required();
    c->add_option("--data", at_data, "Dataset directory")->required();
    c->add_option("--index", at_index, "Example index");
    c->add_option("--id", at_id, "Example id (overrides --index)");
    c->add_option("--out", at_out, "Output directory for AETN tensors");
    c->add_option("--seed", seed, "Random seed");
    at_flags.add(c);
  }
  at->add_option("--goal", at_goal, "adv | btr | high-confidence")
      ->check(CLI::IsMember({"adv", "btr", "high-confidence"}));
  at->add_option("--margin", at_margin, "High-confidence margin")->capture_default_str();
  std::string ex_goal = "explain-plus";
  ex->add_option("--goal", ex_goal, "explain-plus | explain-minus")
      ->check(CLI::IsMember({"explain-plus", "explain-minus"}));
  ex->add_option("--target", at_target, "Class to explain")->required();
  ex->add_option("--rho", at_rho, "RMSE budget")->capture_default_str();

  // ara ----------------------------------------------------------------------
  auto* ar = app.add_subcommand("ara", "Accuracy-robustness curve and area");
  std::string ar_ckpt, ar_data, ar_goal = "adv", ar_out;
  CurveOptions ar_opt;
  AttackFlags ar_flags;
  ar->add_option("--checkpoint", ar_ckpt, "Checkpoint directory")->required();
  ar->add_option("--data", ar_data, "Dataset directory")->required();
  ar->add_option("--goal", ar_goal, "adv | btr")->check(CLI::IsMember({"adv", "btr"}));
  ar->add_option("--quota", ar_opt.quota, "Correctly classified examples to attack")->capture_default_str();
  ar->add_option("--cap", ar_opt.cap, "Integration cap on RMSE")->capture_default_str();
  ar->add_option("--batch", ar_opt.batch, "Examples attacked together")->capture_default_str();
  ar->add_option("--threads", ar_opt.threads, "Worker threads")->capture_default_str();
  ar->add_option("--out", ar_out, "Directory for curve.csv and summary.json");
  ar->add_option("--seed", seed, "Random seed");
  ar_flags.add(ar);

  // serve --------------------------------------------------------------------
  auto* sv = app.add_subcommand("serve", "Annotation service");
  std::string sv_ckpt, sv_data, sv_queue, sv_host = "127.0.0.1", sv_log;
  int sv_port = 8080;
  std::size_t sv_count = 30;
  std::int64_t sv_lease = 600;
  bool sv_overlap = false;
  AttackFlags sv_flags;
  sv->add_option("--checkpoint", sv_ckpt, "Checkpoint directory")->required();
  sv->add_option("--data", sv_data, "Dataset directory")->required();
  sv->add_option("--queue", sv_queue, "Queue directory (generated when empty)")->required();
  sv->add_option("--count", sv_count, "Items to generate for a new queue")->capture_default_str();
  sv->add_option("--log", sv_log, "Annotation log (default <queue>/annotations.jsonl)");
  sv->add_option("--host", sv_host)->capture_default_str();
  sv->add_option("--port", sv_port, "0 picks a free port")->capture_default_str();
  sv->add_option("--lease", sv_lease, "Lease timeout in seconds")->capture_default_str();
  sv->add_flag("--allow-overlap", sv_overlap, "Let several annotators decide the same item");
  sv->add_option("--seed", seed, "Random seed");
  sv_flags.add(sv);

  // merge-retrain ---------------------------------------------------------------
  auto* mr = app.add_subcommand("merge-retrain", "Retrain on the base set plus unchanged annotations");
  std::string mr_data, mr_ann, mr_root, mr_config, mr_out, mr_merged;
  std::optional<int> mr_epochs;
  mr->add_option("--data", mr_data, "Base dataset directory")->required();
  mr->add_option("--annotations", mr_ann, "Annotation log (JSON lines)")->required();
  mr->add_option("--image-root", mr_root, "Directory image paths are relative to (default: the log's)");
  mr->add_option("--config", mr_config, "Training config (JSON)");
  mr->add_option("--epochs", mr_epochs, "Override the configured epoch count");
  mr->add_option("--merged-out", mr_merged, "Also save the merged dataset here");
  mr->add_option("--out", mr_out, "Checkpoint directory")->required();
  auto* mr_seed = mr->add_option("--seed", seed, "Random seed (overrides the config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", {{"type", "usage"}, {"message", e.what()}}}}.dump() << '\n';
    return 2;
  }

  try {
    json out;
    if (gen->parsed()) {
      Dataset ds;
      if (gen_kind == "blobs") {
        ds = gen_blobs(gen_classes, gen_per_class, gen_spread, seed);
      } else if (gen_kind == "digits") {
        ds = gen_digits(gen_classes, gen_per_class, gen_noise, seed);
      } else {
        if (cifar_files.empty()) throw ConfigError("--kind cifar needs --cifar files");
        ds = load_cifar_subset(cifar_files, gen_per_class);
      }
      ds.validate();
      save_dataset(ds, gen_out);
      out = {{"dataset", gen_out}, {"name", ds.name}, {"classes", ds.classes}, {"examples", ds.size()},
             {"image_shape", ds.image_shape}};
    } else if (tr->parsed() || mr->parsed()) {
      const bool merge = mr->parsed();
      const std::string cfg_path = merge ? mr_config : tr_config;
      TrainConfig cfg = cfg_path.empty() ? TrainConfig{} : train_config_from_json(read_file(cfg_path));
      if ((merge ? mr_seed : tr_seed)->count()) cfg.seed = seed;
      if (auto e = merge ? mr_epochs : tr_epochs) cfg.epochs = *e;
      Dataset ds = load_dataset(merge ? mr_data : tr_data);
      if (merge) {
        const auto records = load_annotations(mr_ann);
        const std::string root = mr_root.empty() ? fs::path(mr_ann).parent_path().string() : mr_root;
        const std::size_t before = ds.size();
        ds = merge_annotations(ds, records, root.empty() ? "." : root);
        ds.merged_annotations.push_back(mr_ann);
        std::size_t unchanged = 0;
        for (const auto& r : records) unchanged += r.decision == Decision::Unchanged;
        out["merge"] = {{"base", before}, {"records", records.size()}, {"unchanged", unchanged},
                        {"added", ds.size() - before}, {"examples", ds.size()}};
        if (!mr_merged.empty()) save_dataset(ds, mr_merged);
      }
      if (cfg.preset == "mlp-2d" && ds.image_shape != Shape{2}) cfg.preset = "cnn-tiny";
      auto result = train(cfg, ds, [](const EpochStats& s) {
        std::cerr << "epoch " << s.epoch << " loss " << s.total << " ce " << s.classification << " acc " << s.accuracy
                  << " psi " << s.psi << '\n';
      });
      const std::string dir = merge ? mr_out : tr_out;
      save_checkpoint(result.net, dir);
      result.report.checkpoint = dir;
      write_file(fs::path(dir) / "report.json", to_json(result.report));
      write_file(fs::path(dir) / "config.json", to_json(cfg));
      const auto& f = result.report.final();
      out["checkpoint"] = dir;
      out["epochs"] = result.report.epochs.size();
      out["final"] = {{"classification", f.classification}, {"total", f.total}, {"accuracy", f.accuracy},
                      {"psi", f.psi}};
    } else if (at->parsed() || ex->parsed()) {
      const Network net = load_checkpoint(at_ckpt);
      const Dataset ds = load_dataset(at_data);
      const std::size_t i = find_example(ds, at_index, at_id);
      const Example& e = ds.examples[i];
      AttackConfig cfg = at_flags.config();
      cfg.goal = goal_from_string(ex->parsed() ? ex_goal : at_goal);
      cfg.margin = at_margin;
      if (ex->parsed()) {
        cfg.rho = at_rho;
        cfg.target = at_target;
      }
      const AttackOutcome o = attack(net, e.image, e.label, cfg);
      out = outcome_json(o);
      out["id"] = e.id;
      out["label"] = e.label;
      out["goal"] = to_string(cfg.goal);
      if (o.success && !at_out.empty()) {
        fs::create_directories(at_out);
        const fs::path d(at_out);
        save_aetn((d / "input.aetn").string(), e.image);
        save_aetn((d / "delta.aetn").string(), *o.delta_best);
        save_aetn((d / "attacked.aetn").string(), *o.adversarial);
        out["files"] = {(d / "input.aetn").string(), (d / "delta.aetn").string(), (d / "attacked.aetn").string()};
      }
    } else if (ar->parsed()) {
      const Network net = load_checkpoint(ar_ckpt);
      const Dataset ds = load_dataset(ar_data);
      ar_opt.seed = seed;
      const AraCurve curve = build_curve(net, ds, goal_from_string(ar_goal), ar_flags.config(), ar_opt);
      out = json::parse(curve_summary_json(curve));
      out["goal"] = ar_goal;
      if (curve.partial) out["warning"] = "dataset exhausted before the quota was reached";
      if (!ar_out.empty()) {
        write_file(fs::path(ar_out) / "curve.csv", curve_csv(curve));
        write_file(fs::path(ar_out) / "summary.json", out.dump(2));
      }
    } else if (sv->parsed()) {
      const Network net = load_checkpoint(sv_ckpt);
      std::vector<QueueItem> queue;
      if (fs::exists(fs::path(sv_queue) / "queue.json")) {
        queue = load_queue(sv_queue);
        const auto bad = verify_queue(net, queue, 0.5, 10);
        if (!bad.empty()) throw ConfigError("queue item " + bad.front() + " no longer fools the checkpoint");
      } else {
        const Dataset ds = load_dataset(sv_data);
        QueueOptions qo;
        qo.count = sv_count;
        qo.attack = sv_flags.config();
        qo.seed = seed;
        queue = generate_queue(net, ds, qo);
        save_queue(queue, sv_queue);
      }
      ServiceOptions so;
      so.lease_seconds = sv_lease;
      so.allow_overlap = sv_overlap;
      so.log_path = sv_log.empty() ? (fs::path(sv_queue) / "annotations.jsonl").string() : sv_log;
      so.image_dir = sv_queue;
      AnnotationService service(std::move(queue), so);
      HttpServer server(service);
      const int port = server.bind(sv_host, sv_port);
      std::cout << json{{"listening", sv_host + ":" + std::to_string(port)}, {"queue", service.queue_size()},
                        {"log", so.log_path}}
                       .dump()
                << std::endl;
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server.listen();
      g_server = nullptr;
      return 0;
    }
    std::cout << out.dump() << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::string type = "error";
    if (dynamic_cast<const ShapeError*>(&e)) type = "shape";
    else if (dynamic_cast<const ConfigError*>(&e)) type = "config";
    else if (dynamic_cast<const FormatError*>(&e)) type = "format";
    else if (dynamic_cast<const NumericError*>(&e)) type = "numeric";
    std::cerr << json{{"error", {{"type", type}, {"message", e.what()}}}}.dump() << '\n';
    return 1;
  }
}
