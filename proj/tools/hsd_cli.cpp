// hsd: command-line front end for data generation, training, diverse
// decoding, evaluation, attention analysis and back-translation.
#include "hsd/analysis.hpp"
#include "hsd/backtrans.hpp"
#include "hsd/checkpoint.hpp"
#include "hsd/datagen.hpp"
#include "hsd/decoding.hpp"
#include "hsd/metrics.hpp"
#include "hsd/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hsd;

namespace {

/// Bad flags, missing inputs, inconsistent files: exit code 2.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <typename V>
V convert(const std::string& s) {
  if constexpr (std::is_same_v<V, bool>) {
    return s == "true" || s == "1" || s == "yes";
  } else if constexpr (std::is_same_v<V, std::string>) {
    return s;
  } else if constexpr (std::is_integral_v<V>) {
    return static_cast<V>(std::stoll(s));
  } else {
    return static_cast<V>(std::stod(s));
  }
}

/// Registers options and fills unset ones from a key=value layer, then the
/// JSON config section. Flags always win.
class Binder {
 public:
  Binder(CLI::App* app, std::string section) : app_(app), section_(std::move(section)) {}

  template <typename V>
  CLI::Option* option(const std::string& flags, V& target, const std::string& key, const std::string& help) {
    auto* o = app_->add_option(flags, target, help)->capture_default_str();
    bind(o, target, key);
    return o;
  }

  CLI::Option* flag(const std::string& flags, bool& target, const std::string& key, const std::string& help) {
    auto* o = app_->add_flag(flags, target, help);
    bind(o, target, key);
    return o;
  }

  void apply(const json& config, const std::map<std::string, std::string>& layer = {}) const {
    const json* sec = nullptr;
    if (config.contains(section_) && config[section_].is_object()) sec = &config[section_];
    for (const auto& f : fallbacks_) f(sec, layer);
  }

  [[nodiscard]] bool given(const std::string& key) const {
    auto it = options_.find(key);
    return it != options_.end() && it->second->count() > 0;
  }

 private:
  template <typename V>
  void bind(CLI::Option* o, V& target, const std::string& key) {
    options_[key] = o;
    fallbacks_.push_back([o, &target, key](const json* sec, const std::map<std::string, std::string>& layer) {
      if (o->count() > 0) return;
      try {
        if (auto it = layer.find(key); it != layer.end()) target = convert<V>(it->second);
        else if (sec && sec->contains(key)) target = sec->at(key).get<V>();
      } catch (const std::exception& e) {
        throw UsageError("setting '" + key + "': " + e.what());
      }
    });
  }

  CLI::App* app_;
  std::string section_;
  std::map<std::string, CLI::Option*> options_;
  std::vector<std::function<void(const json*, const std::map<std::string, std::string>&)>> fallbacks_;
};

struct Global {
  std::string config_path;
  std::string run_dir_flag;
  int workers = 1;
  json config = json::object();
  fs::path run_dir = ".";

  void load() {
    if (workers < 1) throw UsageError("--workers must be >= 1");
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw UsageError("config file not found: " + config_path);
      try {
        config = json::parse(read_text_file(config_path));
      } catch (const json::exception& e) {
        throw UsageError("config file " + config_path + ": " + e.what());
      }
      if (!config.is_object()) throw UsageError("config file " + config_path + ": expected a JSON object");
    }
    if (!run_dir_flag.empty()) run_dir = run_dir_flag;
    else if (const char* env = std::getenv("HSD_RUN_DIR"); env && *env) run_dir = env;
    else if (config.contains("run_dir")) run_dir = config["run_dir"].get<std::string>();
    fs::create_directories(run_dir);
  }

  [[nodiscard]] std::string out(const std::string& p) const {
    const fs::path path(p);
    const fs::path full = path.is_absolute() ? path : run_dir / path;
    if (full.has_parent_path()) fs::create_directories(full.parent_path());
    return full.string();
  }
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError("missing required " + what + " path");
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path);
}

/// Non-header, non-empty lines of a text file.
std::vector<std::string> content_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || is_artifact_header(line)) continue;
    out.push_back(line);
  }
  return out;
}

/// Source side of each line; corpus files contribute their first column.
std::vector<Sentence> read_sources(const std::string& path) {
  std::vector<Sentence> out;
  for (const auto& line : content_lines(path)) out.push_back(tokenize(line.substr(0, line.find('\t'))));
  return out;
}

/// One reference set per line: the target column of a corpus line, or the
/// whole line; alternatives separated by " ||| ".
std::vector<std::vector<Sentence>> read_references(const std::string& path) {
  std::vector<std::vector<Sentence>> out;
  for (const auto& line : content_lines(path)) {
    std::string text = line;
    if (const auto tab = line.find('\t'); tab != std::string::npos) {
      const auto tab2 = line.find('\t', tab + 1);
      text = line.substr(tab + 1, tab2 == std::string::npos ? std::string::npos : tab2 - tab - 1);
    }
    std::vector<Sentence> alts;
    std::size_t b = 0;
    for (;;) {
      const auto e = text.find(" ||| ", b);
      alts.push_back(tokenize(text.substr(b, e == std::string::npos ? std::string::npos : e - b)));
      if (e == std::string::npos) break;
      b = e + 5;
    }
    out.push_back(std::move(alts));
  }
  return out;
}

std::vector<HypothesisGroup> read_groups(const std::string& path) {
  std::vector<HypothesisGroup> out;
  std::size_t n = 0;
  for (const auto& line : content_lines(path)) {
    ++n;
    try {
      out.push_back(parse_group(line));
    } catch (const std::exception& e) {
      throw UsageError(path + ": record " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::vector<TokenId>> encode_inputs(const std::vector<Sentence>& sentences, const Vocab& vocab,
                                                bool allow_unk, const std::string& path) {
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (!allow_unk)
      for (const auto& w : sentences[i])
        if (!vocab.contains(w))
          throw UsageError("vocabulary mismatch: '" + w + "' (" + path + ", sentence " + std::to_string(i + 1) +
                           ") is not in the checkpoint's source vocabulary");
    out.push_back(vocab.encode(sentences[i]));
  }
  return out;
}

Checkpoint open_checkpoint(const std::string& path, const Global& g) {
  require_file(path, "checkpoint");
  auto ck = load_checkpoint(path);
  if (g.config.contains("model")) {
    ModelConfig want = g.config["model"].get<ModelConfig>();
    want.vocab_src = ck.config.vocab_src;
    want.vocab_tgt = ck.config.vocab_tgt;
    if (json(want) != json(ck.config))
      throw UsageError("checkpoint " + path + " does not match the model section of the config");
  }
  return ck;
}

std::string config_digest(const ModelConfig& c) { return digest_hex(json(c).dump()); }

/// Fixed-size work items over a shared counter; the first error is rethrown.
template <typename F>
void parallel_for(std::size_t n, int workers, F&& f) {
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex mu;
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n || failed) return;
      try {
        f(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failed.exchange(true)) error = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------- options

struct ModelArgs {
  ModelConfig cfg;
  void add(Binder& b) {
    b.option("--d-model", cfg.d_model, "d_model", "model width");
    b.option("--heads", cfg.n_heads, "n_heads", "attention heads");
    b.option("--enc-layers", cfg.n_enc_layers, "n_enc_layers", "encoder layers");
    b.option("--dec-layers", cfg.n_dec_layers, "n_dec_layers", "decoder layers");
    b.option("--ffn", cfg.d_ffn, "d_ffn", "feed-forward width");
    b.option("--model-max-len", cfg.max_len, "max_len", "longest sequence the model accepts");
    b.flag("--tied-output", cfg.tied_output, "tied_output", "share target embedding and output projection");
  }
};

struct TrainArgs {
  TrainConfig tc;
  int checkpoint_every = 0;
  void add(Binder& b) {
    b.option("--steps", tc.steps, "steps", "optimizer steps");
    b.option("--batch-size", tc.batch_size, "batch_size", "sentence pairs per step");
    b.option("--warmup", tc.optimizer.warmup_steps, "warmup_steps", "learning-rate warmup steps");
    b.option("--lr-scale", tc.optimizer.lr_scale, "lr_scale", "multiplier on the learning-rate schedule");
    b.option("--label-smoothing", tc.optimizer.label_smoothing, "label_smoothing", "label smoothing");
    b.option("--grad-shards", tc.grad_shards, "grad_shards", "fixed gradient shards per batch");
    b.option("--log-every", tc.log_every, "log_every", "loss log interval in steps");
    b.option("--checkpoint-every", checkpoint_every, "checkpoint_every", "periodic checkpoint interval (0 = off)");
  }
};

struct PolicyArgs {
  std::string mode = "beam";
  DecodePolicy p;
  void add(Binder& b) {
    b.option("--mode", mode, "mode", "beam | head_sample | multinomial | sibling_penalty | hamming_penalty");
    b.option("--K", p.K, "K", "confusing-condition threshold (head_sample)");
    b.option("--M", p.M, "M", "outputs per source sentence");
    b.option("--beam", p.beam_size, "beam", "beam size");
    b.option("--penalty", p.penalty_strength, "penalty", "diversity penalty strength");
    b.option("--max-len", p.max_len, "max_len", "generated tokens per output");
    b.option("--alpha", p.length_alpha, "alpha", "length normalization exponent");
    b.option("--layer", p.override_layer, "layer", "decoder layer sampled (-1 = last)");
    b.flag("--all-layers", p.all_layers, "all_layers", "sample heads in every decoder layer");
    b.flag("--shared-head", p.shared_head_sample, "shared_head", "one sampled head per step for the whole beam");
    b.flag("--nbest", p.nbest, "nbest", "top M of a single beam");
  }
  DecodePolicy resolve(std::uint64_t seed) {
    p.mode = parse_mode(mode);
    p.seed = seed;
    return p;
  }
};

// ---------------------------------------------------------------- commands

struct GenData {
  std::string spec_path, out_dir = "data";
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void run(const Global& g) {
    ToyTaskSpec spec;
    if (!spec_path.empty()) {
      require_file(spec_path, "task spec");
      spec = toy_spec_from_text(read_text_file(spec_path));
    }
    if (seed_opt->count()) spec.seed = seed;
    spec.validate();
    ToyTask task(spec);
    const auto corpus = gen_corpus(task);
    const auto digest = digest_hex(to_text(spec));
    const auto base = fs::path(g.out((fs::path(out_dir) / "spec.txt").string())).parent_path();
    write_text_file((base / "spec.txt").string(), artifact_header("task-spec", digest, spec.seed) + "\n" + to_text(spec));
    for (Split s : {Split::train, Split::dev, Split::test}) {
      const auto pairs = corpus.split(s);
      write_text_file((base / (std::string(split_name(s)) + ".tsv")).string(),
                      artifact_header(std::string("corpus-") + split_name(s), digest, spec.seed) + "\n" +
                          format_corpus(pairs, false));
      // every accepted translation, for multi-reference scoring
      std::string refs = artifact_header(std::string("references-") + split_name(s), digest, spec.seed) + "\n";
      for (const auto& p : pairs) {
        const auto valid = valid_translations(p.src, task, 1000);
        if (!valid.sentences) {
          refs += join(p.tgt) + "\n";
          continue;
        }
        bool first = true;
        for (const auto& t : *valid.sentences) {
          if (!first) refs += " ||| ";
          refs += t;
          first = false;
        }
        refs += "\n";
      }
      write_text_file((base / (std::string(split_name(s)) + ".refs")).string(), refs);
      std::cout << split_name(s) << "_pairs=" << pairs.size() << "\n";
    }
    std::cout << "out_dir=" << base.string() << "\n";
  }
};

struct Train {
  std::string train_path, dev_path, out = "model.ckpt";
  std::uint64_t seed = 1;
  bool swap = false;
  ModelArgs model;
  TrainArgs train;

  std::vector<SentencePair> load(const std::string& path) const {
    auto pairs = read_corpus(path);
    if (swap)
      for (auto& p : pairs) std::swap(p.src, p.tgt);
    return pairs;
  }

  void run(const Global& g) {
    require_file(train_path, "training corpus");
    if (!dev_path.empty()) require_file(dev_path, "dev corpus");
    const auto pairs = load(train_path);
    if (pairs.empty()) throw UsageError("training corpus is empty: " + train_path);
    std::vector<Sentence> s, t;
    for (const auto& p : pairs) {
      s.push_back(p.src);
      t.push_back(p.tgt);
    }
    const auto sv = Vocab::build(s), tv = Vocab::build(t);
    ModelConfig cfg = model.cfg;
    cfg.vocab_src = static_cast<int>(sv.size());
    cfg.vocab_tgt = static_cast<int>(tv.size());
    cfg.validate();
    TrainConfig tc = train.tc;
    tc.seed = seed;
    tc.workers = g.workers;
    tc.optimizer.d_model = cfg.d_model;
    if (train.checkpoint_every < 0) throw UsageError("--checkpoint-every must be >= 0");

    json settings = {{"model", cfg}, {"steps", tc.steps}, {"batch_size", tc.batch_size},
                     {"warmup", tc.optimizer.warmup_steps}, {"lr_scale", tc.optimizer.lr_scale},
                     {"label_smoothing", tc.optimizer.label_smoothing}, {"grad_shards", tc.grad_shards},
                     {"corpus", digest_hex(format_corpus(pairs, false))}};
    const auto digest = digest_hex(settings.dump());
    const auto ckpt_path = g.out(out);

    // the trainer reports at the finer of the two intervals; each consumer filters
    const int log_every = train.tc.log_every, every = train.checkpoint_every;
    if (every > 0) tc.log_every = log_every > 0 ? std::gcd(log_every, every) : every;
    Transformer<float> net(cfg, init_params<float>(cfg, tc.seed));
    Trainer<float> trainer(net, tc);
    std::string loss_csv = artifact_header("loss-curve", digest, seed) + "\nstep,loss,lr\n";
    trainer.train(encode_pairs(pairs, sv, tv), [&](const TrainLogEntry& e) {
      if ((log_every > 0 && e.step % log_every == 0) || e.step == tc.steps)
        loss_csv += std::to_string(e.step) + "," + fmt("%.6f", e.loss) + "," + fmt("%.8e", e.lr) + "\n";
      if (every > 0 && e.step % every == 0 && e.step != tc.steps)
        save_checkpoint(ckpt_path + ".step" + std::to_string(e.step), Checkpoint{cfg, net.params(), sv, tv, seed});
    });
    const Checkpoint ck{cfg, net.params(), sv, tv, seed};
    save_checkpoint(ckpt_path, ck);
    write_text_file(ckpt_path + ".loss.csv", loss_csv);
    std::cout << "checkpoint=" << ckpt_path << "\n";
    if (!dev_path.empty()) {
      const auto dev = load(dev_path);
      std::cout << "dev_bleu=" << fmt("%.2f", dev.empty() ? 0.0 : evaluate_bleu(ck, dev, 1, g.workers)) << "\n";
    }
  }
};

struct Translate {
  std::string checkpoint, input, out = "translations.txt";
  int beam = 5, max_len = 64;
  bool allow_unk = false;

  void run(const Global& g) {
    const auto ck = open_checkpoint(checkpoint, g);
    require_file(input, "input");
    const auto sources = encode_inputs(read_sources(input), ck.src_vocab, allow_unk, input);
    DecodePolicy p;
    p.beam_size = beam;
    p.max_len = max_len;
    p.M = 1;
    const auto model = ck.model();
    const auto groups = decode_corpus(model, sources, p, ck.tgt_vocab, g.workers);
    std::string text = artifact_header("translations", digest_hex(config_digest(ck.config) + p.describe()), p.seed) + "\n";
    for (const auto& gr : groups) text += join(gr.outputs.front().words) + "\n";
    write_text_file(g.out(out), text);
    std::cout << "sentences=" << groups.size() << "\n";
  }
};

std::string format_trace(std::uint64_t sentence, const StepTrace<float>& tr) {
  std::ostringstream os;
  os << sentence << '\t' << tr.decode_index << '\t' << tr.step << '\t' << tr.layer << '\t' << int(tr.overridden) << '\t';
  if (tr.histogram) {
    for (std::size_t h = 0; h < tr.histogram->candidates.size(); ++h) os << (h ? "," : "") << tr.histogram->candidates[h];
  } else {
    os << '-';
  }
  os << '\t';
  char buf[32];
  for (Eigen::Index h = 0; h < tr.weights->rows(); ++h) {
    if (h) os << ';';
    for (Eigen::Index c = 0; c < tr.weights->cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>((*tr.weights)(h, c)));
      os << (c ? "," : "") << buf;
    }
  }
  os << '\n';
  return os.str();
}

struct DiverseDecode {
  std::string checkpoint, input, out = "groups.tsv", dump_attention;
  std::uint64_t seed = 1;
  double noise = -1;
  bool allow_unk = false;
  PolicyArgs policy;

  void run(const Global& g) {
    const auto ck = open_checkpoint(checkpoint, g);
    require_file(input, "input");
    const auto sources = encode_inputs(read_sources(input), ck.src_vocab, allow_unk, input);
    const DecodePolicy p = policy.resolve(seed);
    const auto model = ck.model();
    p.validate(model.config().n_heads);
    if (noise > 1) throw UsageError("--noise must be in [0, 1]");
    const bool dump = !dump_attention.empty();
    std::vector<HypothesisGroup> groups(sources.size());
    std::vector<std::string> traces(sources.size());
    parallel_for(sources.size(), g.workers, [&](std::size_t i) {
      TraceSink<float> sink;
      if (dump) sink = [&, i](const StepTrace<float>& tr) { traces[i] += format_trace(i, tr); };
      groups[i] = diverse_decode(model, std::span<const TokenId>(sources[i]), p, ck.tgt_vocab, i, sink);
    });
    if (noise >= 0) groups = noise_groups(std::move(groups), noise, seed);
    const auto digest = digest_hex(config_digest(ck.config) + p.describe() + (noise >= 0 ? fmt("%g", noise) : ""));
    std::string text = artifact_header("groups", digest, seed) + "\n";
    for (const auto& gr : groups) text += format_group(gr) + "\n";
    write_text_file(g.out(out), text);
    if (dump) {
      std::string a = artifact_header("attention", digest, seed) + "\n" +
                      "sentence\tdecode\tstep\tlayer\toverridden\tcandidates\tweights\n";
      for (const auto& t : traces) a += t;
      write_text_file(g.out(dump_attention), a);
    }
    std::cout << "sentences=" << groups.size() << " M=" << p.M << "\n";
  }
};

int k_of(const HypothesisGroup& g) {
  const auto pos = g.policy.find(" K=");
  return pos == std::string::npos ? 0 : std::stoi(g.policy.substr(pos + 3));
}

struct Eval {
  std::vector<std::string> groups_paths;
  std::string refs, baseline, protocol = "average", out = "report.json", sweep_csv, deq_table;

  MetricsReport score(const std::vector<HypothesisGroup>& gs, const std::vector<std::vector<Sentence>>& r,
                      const std::string& name) const {
    if (gs.size() != r.size())
      throw UsageError("misaligned inputs: " + name + " has " + std::to_string(gs.size()) + " records, references " +
                       std::to_string(r.size()) + " lines");
    MetricsReport rep;
    rep.system = fs::path(name).filename().string();
    rep.sentences = gs.size();
    rep.m = gs.empty() ? 0 : gs.front().outputs.size();
    rep.rfb = reference_bleu(gs, r, protocol == "top" ? ReferenceProtocol::baseline_top : ReferenceProtocol::average_of_m);
    rep.pwb = rep.m >= 2 ? pairwise_bleu(gs) : 100.0;
    return rep;
  }

  void run_table(const Global& g) const {
    require_file(deq_table, "DEQ table");
    std::string csv = artifact_header("deq-table", digest_hex(read_text_file(deq_table)), 0) +
                      "\ntable,system,rfb,pwb,published_deq,deq,abs_diff\n";
    std::map<std::string, std::pair<double, double>> base;
    int bad = 0;
    for (const auto& line : content_lines(deq_table)) {
      if (line[0] == '#') continue;
      std::istringstream ls(line);
      std::string table, system, published;
      double rfb = 0, pwb = 0;
      if (!(ls >> table >> system >> rfb >> pwb >> published)) throw UsageError("malformed DEQ table line: " + line);
      if (published == "-") {
        base[table] = {rfb, pwb};
        continue;
      }
      auto it = base.find(table);
      if (it == base.end()) throw UsageError("DEQ table: no baseline row before " + table + " " + system);
      const double d = hsd::deq(it->second.first, it->second.second, rfb, pwb);
      const double diff = std::abs(d - std::stod(published));
      bad += diff > 0.01;
      csv += table + "," + system + "," + fmt("%.2f", rfb) + "," + fmt("%.2f", pwb) + "," + published + "," +
             fmt("%.4f", d) + "," + fmt("%.4f", diff) + "\n";
    }
    write_text_file(g.out(out), csv);
    std::cout << "rows_outside_0.01=" << bad << "\n";
  }

  void run(const Global& g) {
    if (!deq_table.empty()) return run_table(g);
    if (protocol != "average" && protocol != "top") throw UsageError("--protocol must be average or top");
    if (groups_paths.empty()) throw UsageError("eval needs --groups");
    for (const auto& p : groups_paths) require_file(p, "groups file");
    require_file(refs, "references");
    const auto references = read_references(refs);
    std::optional<MetricsReport> base;
    if (!baseline.empty()) {
      require_file(baseline, "baseline");
      const auto lines = content_lines(baseline);
      if (!lines.empty() && lines.front()[0] == '{') {
        std::string body;
        for (const auto& l : lines) body += l + "\n";
        base = MetricsReport::from_json(json::parse(body));
      } else {
        base = score(read_groups(baseline), references, baseline);
      }
    }
    std::vector<std::pair<int, MetricsReport>> rows;
    json j = json::array();
    for (const auto& path : groups_paths) {
      const auto gs = read_groups(path);
      auto rep = score(gs, references, path);
      if (base) rep.set_baseline(base->rfb, base->pwb);
      std::cout << rep.table();
      rows.emplace_back(gs.empty() ? 0 : k_of(gs.front()), rep);
      j.push_back(rep.to_json());
    }
    const auto digest = digest_hex(j.dump());
    write_text_file(g.out(out), artifact_header("metrics", digest, 0) + "\n" + (j.size() == 1 ? j[0] : j).dump(2) + "\n");
    if (!sweep_csv.empty())
      write_text_file(g.out(sweep_csv), artifact_header("k-sweep", digest, 0) + "\n" + k_sweep_csv(rows));
  }
};

struct Analyze {
  std::string checkpoint, baseline_checkpoint, input, groups, out_dir = "analysis";
  int max_len = 64;
  std::size_t bucket_width = 5;
  bool allow_unk = false;

  void run(const Global& g) {
    const auto ck = open_checkpoint(checkpoint, g);
    const auto base_ck = baseline_checkpoint.empty() ? ck : open_checkpoint(baseline_checkpoint, g);
    if (!(base_ck.src_vocab == ck.src_vocab) || !(base_ck.tgt_vocab == ck.tgt_vocab))
      throw UsageError("baseline checkpoint vocabularies differ from the analyzed checkpoint");
    require_file(input, "input");
    const auto sentences = read_sources(input);
    const auto sources = encode_inputs(sentences, ck.src_vocab, allow_unk, input);
    const auto model = ck.model();
    const auto base_model = base_ck.model();
    // fixed chunking keeps the floating-point merge order independent of --workers
    constexpr std::size_t kChunks = 16;
    std::vector<HeadAlignmentStats> parts(kChunks);
    parallel_for(kChunks, g.workers, [&](std::size_t c) {
      const std::size_t b = sources.size() * c / kChunks, e = sources.size() * (c + 1) / kChunks;
      parts[c] = alignment_stats(std::vector<std::vector<TokenId>>(sources.begin() + static_cast<long>(b),
                                                                   sources.begin() + static_cast<long>(e)),
                                 model, base_model, max_len);
    });
    HeadAlignmentStats stats;
    for (const auto& p : parts) stats.merge(p);
    const auto digest = digest_hex(config_digest(ck.config) + config_digest(base_ck.config) + std::to_string(max_len));
    const auto dir = fs::path(out_dir);
    write_text_file(g.out((dir / "rank_histogram.csv").string()),
                    artifact_header("rank-histogram", digest, ck.seed) + "\n" + rank_histogram_csv(stats));
    write_text_file(g.out((dir / "nll_table.csv").string()),
                    artifact_header("nll-table", digest, ck.seed) + "\n" + nll_table_csv(stats));
    std::cout << "steps=" << stats.steps << " events=" << stats.events()
              << " top5=" << fmt("%.4f", stats.fraction_in_top(5)) << " head_avg_nll=" << fmt("%.4f", stats.head_average_nll())
              << "\n";
    if (!groups.empty()) {
      require_file(groups, "groups file");
      const auto gs = read_groups(groups);
      if (gs.size() != sentences.size()) throw UsageError("misaligned inputs: " + groups + " vs " + input);
      std::vector<std::size_t> lengths;
      for (const auto& s : sentences) lengths.push_back(s.size());
      const auto curve = length_diversity_curve(gs, lengths, bucket_width);
      write_text_file(g.out((dir / "length_curve.csv").string()),
                      artifact_header("length-curve", digest, ck.seed) + "\n" + length_curve_csv(curve));
      if (curve.size() >= 2) {
        std::vector<double> x, y;
        for (const auto& b : curve) {
          x.push_back(static_cast<double>(b.lo + b.hi) / 2);
          y.push_back(b.pwb);
        }
        std::cout << "length_pwb_spearman=" << fmt("%.4f", spearman(x, y)) << "\n";
      }
    }
  }
};

struct Backtranslate {
  std::string reverse, train_path, targets, plan_path, out = "augmented.tsv", forward_out, test_path;
  std::uint64_t seed = 1;
  double ratio = 1.0;
  PolicyArgs policy;
  ModelArgs model;
  TrainArgs train;

  void run(const Global& g, std::initializer_list<const Binder*> plan_binders) {
    std::map<std::string, std::string> plan;
    if (!plan_path.empty()) {
      require_file(plan_path, "plan");
      plan = parse_key_values(read_text_file(plan_path));
    }
    for (const auto* b : plan_binders) b->apply(g.config, plan);
    const auto ck = open_checkpoint(reverse, g);
    require_file(train_path, "training corpus");
    const auto original = read_corpus(train_path);
    std::vector<Sentence> tgts;
    if (targets.empty()) {
      for (const auto& p : original) tgts.push_back(p.tgt);
    } else {
      require_file(targets, "monolingual targets");
      tgts = read_sources(targets);
    }
    for (std::size_t i = 0; i < tgts.size(); ++i)
      for (const auto& w : tgts[i])
        if (!ck.src_vocab.contains(w))
          throw UsageError("vocabulary mismatch: target word '" + w + "' is unknown to the reverse model");
    AugmentationPlan ap;
    ap.policy = policy.resolve(seed);
    ap.reuse_training_targets = targets.empty();
    ap.mixing_ratio = ratio;
    ap.workers = g.workers;
    const auto synth = synthesize_pairs(ck, tgts, ap);
    const auto mixed = mix_corpora(original, synth, ratio, seed);
    const auto digest = digest_hex(config_digest(ck.config) + ap.policy.describe() + fmt("%g", ratio) +
                                   digest_hex(format_corpus(original, false)));
    write_text_file(g.out(out), artifact_header("augmented-corpus", digest, seed) + "\n" + format_corpus(mixed, true));
    std::cout << "original_pairs=" << original.size() << " synthetic_pairs=" << synth.size()
              << " training_pairs=" << mixed.size() << "\n";
    if (forward_out.empty()) return;
    std::vector<Sentence> s, t;
    for (const auto& p : original) {
      s.push_back(p.src);
      t.push_back(p.tgt);
    }
    std::vector<SentencePair> test;
    if (!test_path.empty()) {
      require_file(test_path, "test corpus");
      test = read_corpus(test_path);
    }
    TrainConfig tc = train.tc;
    tc.seed = seed;
    tc.workers = g.workers;
    tc.optimizer.d_model = model.cfg.d_model;
    tc.log_every = 0;
    const auto [fwd, rep] = mix_and_train(original, synth, ratio, Vocab::build(s), Vocab::build(t), model.cfg, tc, test);
    save_checkpoint(g.out(forward_out), fwd);
    if (!test.empty()) std::cout << "test_bleu=" << fmt("%.2f", rep.test_bleu) << "\n";
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diverse decoding by sampling attention heads: toy data, training, decoding and metrics"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--config", g.config_path, "JSON config; flags override its values");
  app.add_option("--run-dir", g.run_dir_flag, "directory for relative output paths (default: $HSD_RUN_DIR or .)");
  app.add_option("--workers", g.workers, "parallel decode/training workers; results do not depend on it")
      ->capture_default_str();

  GenData gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate a toy parallel corpus");
  c_gen->add_option("--spec", gen.spec_path, "task spec (key = value lines)");
  c_gen->add_option("--out-dir", gen.out_dir, "output directory")->capture_default_str();
  gen.seed_opt = c_gen->add_option("--seed", gen.seed, "override the spec seed");

  Train tr;
  auto* c_train = app.add_subcommand("train", "train a model on a corpus");
  Binder b_train_data(c_train, "data"), b_train_model(c_train, "model"), b_train(c_train, "train");
  b_train_data.option("--train", tr.train_path, "train", "training corpus");
  b_train_data.option("--dev", tr.dev_path, "dev", "dev corpus (greedy BLEU printed at the end)");
  c_train->add_option("--out", tr.out, "checkpoint path")->capture_default_str();
  c_train->add_option("--seed", tr.seed, "initialization and batching seed")->capture_default_str();
  c_train->add_flag("--swap", tr.swap, "train the reverse direction (target to source)");
  tr.model.add(b_train_model);
  tr.train.add(b_train);

  Translate tl;
  auto* c_tl = app.add_subcommand("translate", "top beam output per input line");
  c_tl->add_option("--checkpoint", tl.checkpoint, "checkpoint")->required();
  c_tl->add_option("--input", tl.input, "source sentences or corpus file")->required();
  c_tl->add_option("--out", tl.out, "output path")->capture_default_str();
  c_tl->add_option("--beam", tl.beam, "beam size")->capture_default_str();
  c_tl->add_option("--max-len", tl.max_len, "generated tokens")->capture_default_str();
  c_tl->add_flag("--allow-unk", tl.allow_unk, "map unknown input words to <unk>");

  DiverseDecode dd;
  auto* c_dd = app.add_subcommand("diverse-decode", "M outputs per input line under a decoding policy");
  Binder b_dd(c_dd, "decode");
  c_dd->add_option("--checkpoint", dd.checkpoint, "checkpoint")->required();
  c_dd->add_option("--input", dd.input, "source sentences or corpus file")->required();
  c_dd->add_option("--out", dd.out, "group records")->capture_default_str();
  b_dd.option("--seed", dd.seed, "seed", "decoding seed");
  c_dd->add_option("--dump-attention", dd.dump_attention, "write traced cross-attention weights here");
  c_dd->add_option("--noise", dd.noise, "perturb every output with probability p (noise-set baseline)");
  c_dd->add_flag("--allow-unk", dd.allow_unk, "map unknown input words to <unk>");
  dd.policy.add(b_dd);

  Eval ev;
  auto* c_ev = app.add_subcommand("eval", "reference BLEU, pair-wise BLEU and DEQ");
  c_ev->add_option("--groups", ev.groups_paths, "group files (several make a K sweep)");
  c_ev->add_option("--refs", ev.refs, "references: corpus file or lines of alternatives joined by ' ||| '");
  c_ev->add_option("--baseline", ev.baseline, "baseline report or group file");
  c_ev->add_option("--protocol", ev.protocol, "reference BLEU protocol: average | top")->capture_default_str();
  c_ev->add_option("--out", ev.out, "report path")->capture_default_str();
  c_ev->add_option("--sweep-csv", ev.sweep_csv, "K sweep CSV path");
  c_ev->add_option("--deq-table", ev.deq_table, "recompute DEQ for rows of a published rfb/pwb table");

  Analyze an;
  auto* c_an = app.add_subcommand("analyze", "head alignment statistics and length curve");
  c_an->add_option("--checkpoint", an.checkpoint, "checkpoint")->required();
  c_an->add_option("--baseline-checkpoint", an.baseline_checkpoint, "word translator model (default: same)");
  c_an->add_option("--input", an.input, "source sentences or corpus file")->required();
  c_an->add_option("--groups", an.groups, "group file for the length-vs-diversity curve");
  c_an->add_option("--out-dir", an.out_dir, "output directory")->capture_default_str();
  c_an->add_option("--max-len", an.max_len, "generated tokens")->capture_default_str();
  c_an->add_option("--bucket-width", an.bucket_width, "source-length bucket width")->capture_default_str();
  c_an->add_flag("--allow-unk", an.allow_unk, "map unknown input words to <unk>");

  Backtranslate bt;
  auto* c_bt = app.add_subcommand("backtranslate", "synthesize sources with a reverse model and mix them in");
  Binder b_bt(c_bt, "decode"), b_bt_model(c_bt, "model"), b_bt_train(c_bt, "train"), b_bt_plan(c_bt, "backtranslate");
  c_bt->add_option("--reverse", bt.reverse, "reverse (target to source) checkpoint")->required();
  c_bt->add_option("--train", bt.train_path, "original training corpus")->required();
  b_bt_plan.option("--targets", bt.targets, "targets", "monolingual targets (default: training targets)");
  c_bt->add_option("--plan", bt.plan_path, "plan file (key = value); flags override it");
  b_bt_plan.option("--ratio", bt.ratio, "mixing_ratio", "fraction of synthetic pairs mixed in");
  b_bt_plan.option("--seed", bt.seed, "seed", "decoding and mixing seed");
  c_bt->add_option("--out", bt.out, "mixed corpus with origin column")->capture_default_str();
  c_bt->add_option("--forward-out", bt.forward_out, "train a forward model on the mix and save it here");
  c_bt->add_option("--test", bt.test_path, "test corpus scored with the forward model");
  bt.policy.add(b_bt);
  bt.model.add(b_bt_model);
  bt.train.add(b_bt_train);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    g.load();
    if (c_gen->parsed()) {
      gen.run(g);
    } else if (c_train->parsed()) {
      for (auto* b : {&b_train_data, &b_train_model, &b_train}) b->apply(g.config);
      if (!c_train->get_option("--seed")->count() && g.config.contains("seed")) tr.seed = g.config["seed"].get<std::uint64_t>();
      tr.run(g);
    } else if (c_tl->parsed()) {
      tl.run(g);
    } else if (c_dd->parsed()) {
      b_dd.apply(g.config);
      if (!b_dd.given("seed") && g.config.contains("seed")) dd.seed = g.config["seed"].get<std::uint64_t>();
      dd.run(g);
    } else if (c_ev->parsed()) {
      ev.run(g);
    } else if (c_an->parsed()) {
      an.run(g);
    } else if (c_bt->parsed()) {
      for (auto* b : {&b_bt_model, &b_bt_train}) b->apply(g.config);
      bt.run(g, {&b_bt, &b_bt_plan});
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "hsd: error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "hsd: failed: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
