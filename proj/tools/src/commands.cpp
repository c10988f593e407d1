#include "flamingo/cli/commands.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ostream>

#include <json.hpp>

#include "flamingo/checkpoint.hpp"
#include "flamingo/cli/data.hpp"
#include "flamingo/contrastive.hpp"
#include "flamingo/fewshot.hpp"
#include "flamingo/io.hpp"
#include "flamingo/train.hpp"

namespace flamingo::cli {
namespace fs = std::filesystem;
namespace {

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void say(const Context& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << std::endl;
}

bool due(const Context& ctx, std::size_t step, std::size_t total) {
  return ctx.log && (step == 1 || step == total || (ctx.log_every && step % ctx.log_every == 0));
}

fs::path prepare(const Context& ctx, const RunConfig& cfg, const std::string& command) {
  const fs::path dir = run_dir(ctx, cfg);
  fs::create_directories(dir);
  io::write_file_atomic(dir / (command + ".config.json"), resolved_json(cfg));
  return dir;
}

fs::path or_default(const std::string& configured, const fs::path& fallback) {
  return configured.empty() ? fallback : fs::path(configured);
}

void require_file(const fs::path& p, const std::string& what, const std::string& hint) {
  if (!fs::exists(p)) throw std::runtime_error("missing " + what + " " + p.string() + hint);
}

void check_vocab_fits(const Vocab& vocab, const RunConfig& cfg) {
  if (vocab.size() > cfg.model.flamingo.lm.vocab) {
    throw ConfigError("config field 'model.lm.vocab': " + std::to_string(cfg.model.flamingo.lm.vocab) +
                      " is smaller than the tokenizer vocabulary (" + std::to_string(vocab.size()) + ")");
  }
}

struct LoadedModel {
  FlamingoModel model;
  Vocab vocab;
};

LoadedModel load_trained(const RunConfig& cfg, const Context& ctx) {
  const fs::path dir = run_dir(ctx, cfg);
  const fs::path ckpt = or_default(cfg.model.checkpoint, dir / "model.ckpt");
  const fs::path vocab_path = or_default(cfg.model.vocab, dir / "vocab.txt");
  require_file(ckpt, "model checkpoint", " (run train first)");
  require_file(vocab_path, "vocabulary", " (run pretrain-lm first)");
  Rng init = make_rng(cfg.seed, "init", 2);
  auto model = FlamingoModel::assemble(cfg.model.flamingo, init);
  checkpoint::load_into(model.params(), ckpt);
  auto vocab = Vocab::load(vocab_path);
  check_vocab_fits(vocab, cfg);
  return {std::move(model), std::move(vocab)};
}

DecodeOptions decode_options(const EvalSpec& e) {
  DecodeOptions d;
  d.mode = e.decode == "greedy" ? DecodeMode::greedy : DecodeMode::beam;
  d.width = e.beam_width;
  d.max_len = e.max_len;
  return d;
}

}  // namespace

fs::path default_out_root() {
  const char* env = std::getenv(kOutRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path run_dir(const Context& ctx, const RunConfig& cfg) {
  return (ctx.out_root.empty() ? default_out_root() : ctx.out_root) / cfg.name;
}

ContrastiveReport cmd_pretrain_contrastive(const RunConfig& cfg, const Context& ctx) {
  const fs::path dir = prepare(ctx, cfg, "pretrain-contrastive");
  const auto& c = cfg.contrastive;
  const Vocab vocab = synth::build_vocab(cfg.data.synth);
  DualEncoderConfig dc;
  dc.vision = cfg.model.flamingo.vision;
  dc.vocab = vocab.size();
  dc.text_width = c.text_width;
  dc.text_layers = c.text_layers;
  dc.text_heads = c.text_heads;
  dc.text_max_len = c.text_max_len;
  dc.joint = c.joint;
  dc.init_beta = c.init_beta;
  Rng init = make_rng(cfg.seed, "init", 0);
  DualEncoder enc(dc, init);

  ContrastiveOptions opts;
  opts.strategy = parse_strategy(c.strategy);
  opts.smoothing = c.smoothing;
  opts.optim.peak_lr = c.peak_lr;
  opts.optim.warmup_steps = c.warmup;
  auto datasets = build_contrastive_datasets(cfg);
  std::string csv = "step";
  for (const auto& d : datasets) csv += ",loss_" + d.name;
  csv += ",total,grad_norm,lr,beta\n";
  ContrastiveTrainer trainer(enc, datasets, opts, make_rng(cfg.seed, "data", 1000), vocab);
  ContrastiveReport report;
  report.strategy = c.strategy;
  for (std::size_t s = 1; s <= c.steps; ++s) {
    auto r = trainer.step();
    csv += std::to_string(r.step);
    for (double l : r.losses) csv += "," + num(l);
    csv += "," + num(r.total) + "," + num(r.grad_norm) + "," + num(r.lr) + "," + num(r.beta) + "\n";
    report.final_loss = r.total;
    if (due(ctx, s, c.steps)) say(ctx, "[contrastive " + c.strategy + "] step " + std::to_string(s) + " loss " + num(r.total));
  }
  Rng held = make_rng(cfg.seed, "data", 2000);
  const auto h = held_out_pairs(cfg.data.synth, dc.vision, vocab, held);
  const Tensor v = enc.image_embeddings(h.images), l = enc.text_embeddings(h.texts);
  const auto r1 = retrieval_recall(v, l, 1), r5 = retrieval_recall(v, l, 5);
  report.i2t_at_1 = r1.image_to_text;
  report.t2i_at_1 = r1.text_to_image;
  report.i2t_at_5 = r5.image_to_text;
  report.t2i_at_5 = r5.text_to_image;
  report.recall_at_1 = 0.5 * (r1.image_to_text + r1.text_to_image);
  report.checkpoint = dir / "vision.ckpt";
  enc.export_vision(report.checkpoint);
  io::write_file_atomic(dir / "contrastive_metrics.csv", csv);
  io::write_file_atomic(dir / "contrastive_recall.csv",
                        "strategy,steps,pairs,i2t_r1,t2i_r1,i2t_r5,t2i_r5,mean_r1\n" + c.strategy + "," +
                            std::to_string(c.steps) + "," + std::to_string(h.images.size()) + "," + num(report.i2t_at_1) +
                            "," + num(report.t2i_at_1) + "," + num(report.i2t_at_5) + "," + num(report.t2i_at_5) + "," +
                            num(report.recall_at_1) + "\n");
  say(ctx, "[contrastive " + c.strategy + "] held-out R@1 " + num(report.recall_at_1));
  return report;
}

LMReport cmd_pretrain_lm(const RunConfig& cfg, const Context& ctx) {
  const fs::path dir = prepare(ctx, cfg, "pretrain-lm");
  const auto data = load_datasets(cfg);
  const Vocab vocab = build_run_vocab(cfg, data);
  check_vocab_fits(vocab, cfg);
  std::vector<std::string> texts;
  for (const auto& d : data) texts.insert(texts.end(), d.texts.begin(), d.texts.end());
  auto source = std::make_shared<TextSource>(texts, vocab, cfg.lm_pretrain.length);

  LanguageModel lm(cfg.model.flamingo.lm);
  ParamStore params;
  Rng init = make_rng(cfg.seed, "init", 1);
  lm.init(params, init);
  LMPretrainOptions opts;
  opts.batch_size = cfg.lm_pretrain.batch_size;
  opts.optim.peak_lr = cfg.lm_pretrain.peak_lr;
  opts.optim.warmup_steps = cfg.lm_pretrain.warmup;
  LMPretrainer trainer(lm, params, source, opts, make_rng(cfg.seed, "data", 1001));
  LMReport report;
  std::string csv = "step,loss\n";
  for (std::size_t s = 1; s <= cfg.lm_pretrain.steps; ++s) {
    const double loss = trainer.step();
    if (s == 1) report.initial_loss = loss;
    report.final_loss = loss;
    csv += std::to_string(s) + "," + num(loss) + "\n";
    if (due(ctx, s, cfg.lm_pretrain.steps)) say(ctx, "[pretrain-lm] step " + std::to_string(s) + " loss " + num(loss));
  }
  report.checkpoint = or_default(cfg.model.lm_checkpoint, dir / "lm.ckpt");
  checkpoint::save(params, report.checkpoint);
  vocab.save(or_default(cfg.model.vocab, dir / "vocab.txt"));
  io::write_file_atomic(dir / "lm_metrics.csv", csv);
  return report;
}

TrainReport cmd_train(const RunConfig& cfg, const Context& ctx, const TrainFlags& flags) {
  const fs::path dir = run_dir(ctx, cfg);
  const fs::path lm_path = or_default(cfg.model.lm_checkpoint, dir / "lm.ckpt");
  const fs::path vision_path = or_default(cfg.model.vision_checkpoint, dir / "vision.ckpt");
  const fs::path vocab_path = or_default(cfg.model.vocab, dir / "vocab.txt");
  if (flags.pretrain_lm && (!fs::exists(lm_path) || !fs::exists(vocab_path))) cmd_pretrain_lm(cfg, ctx);
  if (flags.pretrain_vision && !fs::exists(vision_path)) cmd_pretrain_contrastive(cfg, ctx);
  require_file(lm_path, "LM checkpoint", " (run pretrain-lm or pass --pretrain-lm)");
  require_file(vocab_path, "vocabulary", " (run pretrain-lm or pass --pretrain-lm)");
  require_file(vision_path, "vision checkpoint", " (run pretrain-contrastive or pass --pretrain-vision)");
  prepare(ctx, cfg, "train");

  const Vocab vocab = Vocab::load(vocab_path);
  check_vocab_fits(vocab, cfg);
  const auto data = load_datasets(cfg);
  MixtureSpec mixture = build_mixture(cfg, data, vocab);

  Rng init = make_rng(cfg.seed, "init", 2);
  auto model = FlamingoModel::assemble(cfg.model.flamingo, init);
  checkpoint::load_into(model.params(), vision_path, {"vision"});
  checkpoint::load_into(model.params(), lm_path, {"lm"});
  model.reset_eoc_embedding();

  TrainReport report;
  {
    Rng probe = make_rng(cfg.seed, "data", 3000);
    for (const auto& inst : next_pooled_batch(mixture, probe)) {
      Graph g(&model.params(), GradMode::none);
      const Tensor full = model.forward(g, inst).value();
      const Tensor lm = model.forward_lm_only(g, inst.text).value();
      for (std::size_t k = 0; k < full.numel(); ++k)
        report.gate_identity_error = std::max(report.gate_identity_error, std::abs(full[k] - lm[k]));
    }
    if (!(report.gate_identity_error <= 1e-10)) {
      throw std::runtime_error("gate identity violated before training: max |multimodal - LM| = " +
                               num(report.gate_identity_error));
    }
    say(ctx, "[train] gate identity holds at step 0 (max diff " + num(report.gate_identity_error) + ")");
  }

  TrainOptions opts;
  opts.strategy = parse_strategy(cfg.train.strategy);
  opts.clip.mode = parse_clip_mode(cfg.train.clip);
  opts.clip.threshold = cfg.train.clip_threshold;
  opts.optim.peak_lr = cfg.train.peak_lr;
  opts.optim.warmup_steps = cfg.train.warmup;
  opts.optim.weight_decay = cfg.train.weight_decay;
  opts.freeze = {cfg.train.freeze_vision, cfg.train.freeze_lm, cfg.train.lm_lr_multiplier};
  std::vector<std::string> names;
  for (const auto& d : mixture.datasets) names.push_back(d.name);
  Trainer trainer(model, std::move(mixture), opts, make_rng(cfg.seed, "data", 1002));
  MetricLog log(names, model.gated_blocks().size());
  for (std::size_t s = 1; s <= cfg.train.steps; ++s) {
    auto r = trainer.step();
    if (s == 1) report.initial_loss = r.total;
    report.final_loss = r.total;
    log.append(r);
    if (due(ctx, s, cfg.train.steps)) {
      std::string line = "[train " + cfg.train.strategy + "] step " + std::to_string(s) + " loss " + num(r.total);
      if (!r.gates.empty()) line += " gate0 " + num(r.gates[0].attn) + "/" + num(r.gates[0].ffw);
      say(ctx, line);
    }
  }
  report.checkpoint = or_default(cfg.model.checkpoint, dir / "model.ckpt");
  report.metrics = dir / "metrics.csv";
  checkpoint::save(model.params(), report.checkpoint);
  log.write(report.metrics);
  return report;
}

EvalSummary cmd_eval(const RunConfig& cfg, const Context& ctx) {
  auto [model, vocab] = load_trained(cfg, ctx);
  const fs::path dir = prepare(ctx, cfg, "eval");
  const auto& e = cfg.eval;
  std::vector<std::pair<std::string, EvalTask>> tasks;
  if (!e.task_file.empty()) {
    tasks.emplace_back(fs::path(e.task_file).stem().string(), load_eval_task(e.task_file, cfg.model.flamingo.vision));
  } else {
    for (std::size_t t = 0; t < e.tasks.size(); ++t) {
      Rng rng = make_rng(cfg.seed, "data", 4000 + t);
      tasks.emplace_back(e.tasks[t], synthetic_task(e.tasks[t], e.pool, e.queries, e.classes, cfg.data.synth,
                                                    cfg.model.flamingo.vision, rng));
    }
  }
  EvalOptions opts;
  opts.mode = e.mode == "open_ended" ? EvalMode::open_ended : EvalMode::close_ended;
  opts.rices = e.rices;
  opts.ensemble = e.ensemble;
  opts.decode = decode_options(e);
  EvalSummary summary;
  FeatureCache cache;
  std::string csv = "task,shots,mode,rices,ensemble,queries,accuracy\n";
  std::string predictions;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& [name, task] = tasks[t];
    for (std::size_t shots : e.shots) {
      opts.shots = shots;
      Rng shuffle = make_rng(cfg.seed, "shuffle", t * 1000 + shots);
      Rng ensemble = make_rng(cfg.seed, "ensemble", t * 1000 + shots);
      const auto rep = evaluate_task(model, task, vocab, opts, shuffle, ensemble, &cache);
      summary.rows.push_back({name, shots, task.queries.size(), rep.accuracy});
      csv += name + "," + std::to_string(shots) + "," + e.mode + "," + (e.rices ? "true" : "false") + "," +
             std::to_string(e.ensemble) + "," + std::to_string(task.queries.size()) + "," + num(rep.accuracy) + "\n";
      for (const auto& r : rep.results) {
        nlohmann::json j = {{"task", name},          {"shots", shots},
                            {"query", r.query},      {"support", r.shots},
                            {"prediction", r.prediction}, {"answer", task.queries[r.query].answer},
                            {"correct", r.correct}};
        predictions += j.dump() + "\n";
      }
      say(ctx, "[eval] " + name + " shots=" + std::to_string(shots) + (e.rices ? " rices" : "") + " accuracy " +
                   num(rep.accuracy));
    }
  }
  summary.predictions = dir / "predictions.jsonl";
  io::write_file_atomic(summary.predictions, predictions);
  io::write_file_atomic(dir / "eval.csv", csv);
  return summary;
}

std::vector<Generation> cmd_generate(const RunConfig& cfg, const Context& ctx, const fs::path& prompts) {
  auto [model, vocab] = load_trained(cfg, ctx);
  const auto docs = load_jsonl_documents(prompts, cfg.model.flamingo.vision);
  const fs::path dir = prepare(ctx, cfg, "generate");
  const auto opts = decode_options(cfg.eval);
  std::vector<Generation> out;
  std::string lines;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    auto tagged = tag_document(docs[i], vocab);
    tagged.tokens.resize(tagged.tokens.size() - 2);  // drop the closing <EOC> <EOS>
    TrainingInstance prompt;
    prompt.indices = compute_phi(tagged.tokens.size(), tagged.image_positions, PhiDirection::previous);
    prompt.text = std::move(tagged.tokens);
    prompt.images = std::move(tagged.images);
    prompt.real_images = prompt.images.size();
    if (prompt.text.size() >= cfg.model.flamingo.lm.max_len) {
      throw std::runtime_error(prompts.string() + ":" + std::to_string(i + 1) + ": prompt of " +
                               std::to_string(prompt.text.size()) + " tokens leaves no room to generate");
    }
    const auto d = decode(model, prompt, vocab, opts);
    out.push_back({d.text, d.completion.log_likelihood, d.completion.finished});
    nlohmann::json j = {{"prompt", i}, {"text", d.text}, {"raw", d.raw},
                        {"log_likelihood", d.completion.log_likelihood}, {"finished", d.completion.finished}};
    lines += j.dump() + "\n";
  }
  io::write_file_atomic(dir / "generations.jsonl", lines);
  return out;
}

std::vector<SuiteResult> cmd_selftest(const SelftestOptions& opts, std::ostream& out) {
  auto results = run_selftest(opts);
  for (const auto& r : results) out << (r.ok ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
  return results;
}

}  // namespace flamingo::cli
