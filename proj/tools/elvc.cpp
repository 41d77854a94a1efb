#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "elvc/core/error.hpp"
#include "elvc/core/matrix_io.hpp"
#include "elvc/core/wav.hpp"
#include "elvc/corpus/build.hpp"
#include "elvc/eval/evaluate.hpp"
#include "elvc/pipeline/experiment.hpp"

namespace fs = std::filesystem;
using namespace elvc;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

pipeline::ExperimentConfig read_config(const std::string& path) {
  return path.empty() ? pipeline::ExperimentConfig{} : pipeline::load_config(path);
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Electrolaryngeal speech enhancement toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  std::string root = pipeline::default_checkpoint_root().string();
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (JSON)");
    cmd->add_option("--root", root, std::string("checkpoint root (default $") + pipeline::kCheckpointRootEnv + ")");
  };

  auto* config_cmd = app.add_subcommand("config", "print an experiment config");
  bool tiny = false;
  config_cmd->add_flag("--tiny", tiny, "smoke-test sizes");
  config_cmd->add_option("--config", config_path, "config to normalize");

  auto* corpus_cmd = app.add_subcommand("corpus", "synthetic corpus");
  corpus_cmd->require_subcommand(1);
  auto* gen = corpus_cmd->add_subcommand("gen", "generate the corpus");
  std::string out_dir;
  gen->add_option("--config", config_path, "corpus or experiment config (JSON)");
  gen->add_option("--out", out_dir, "output directory")->required();
  auto* validate = corpus_cmd->add_subcommand("validate", "check a manifest");
  std::string manifest_path;
  validate->add_option("manifest", manifest_path, "manifest.jsonl")->required();

  auto* train = app.add_subcommand("train", "train one module stage (and anything it depends on)");
  train->require_subcommand(1);
  auto* train_rec = train->add_subcommand("recognition", "recognizer stage 1, 2 or 3");
  int rec_stage = 3;
  add_common(train_rec);
  train_rec->add_option("--stage", rec_stage, "1: typical, 2: intermediate, 3: target EL")->check(CLI::Range(1, 3));
  auto* train_units = train->add_subcommand("units", "fit the unit codebook");
  add_common(train_units);
  auto* train_al = train->add_subcommand("alignment", "alignment stages for one system");
  std::string system_id = "4";
  std::string al_stage;
  add_common(train_al);
  train_al->add_option("--system", system_id, "system id from the config");
  train_al->add_option("--stage", al_stage, "last stage to train (default: all)");
  auto* train_syn = train->add_subcommand("synthesis", "diffusion decoder");
  std::string phase = "adapt";
  add_common(train_syn);
  train_syn->add_option("--phase", phase, "pretrain or adapt")->check(CLI::IsMember({"pretrain", "adapt"}));

  auto* run = app.add_subcommand("run", "train and evaluate every configured system");
  std::vector<std::string> systems;
  bool no_eval = false;
  add_common(run);
  run->add_option("--systems", systems, "subset of system ids")->delimiter(',');
  run->add_flag("--no-eval", no_eval, "skip conversion and scoring");

  auto* bnf = app.add_subcommand("bnf", "bottleneck features");
  bnf->require_subcommand(1);
  auto* bnf_extract = bnf->add_subcommand("extract", "dump BNFs of a WAV");
  std::string recognizer_path, in_path, out_path;
  bnf_extract->add_option("--recognizer", recognizer_path, "recognizer checkpoint")->required();
  bnf_extract->add_option("--in", in_path, "16 kHz WAV")->required();
  bnf_extract->add_option("--out", out_path, "matrix dump (.emat)")->required();

  std::string lineage_path;
  std::uint64_t seed = 11;
  auto* convert = app.add_subcommand("convert", "EL WAV in, enhanced WAV out");
  std::string meta_path;
  convert->add_option("--system", lineage_path, "system lineage JSON")->required();
  convert->add_option("--in", in_path, "input WAV")->required();
  convert->add_option("--out", out_path, "output WAV")->required();
  convert->add_option("--seed", seed, "sampling seed");
  convert->add_option("--meta", meta_path, "write conversion metadata JSON here");

  auto* synth = app.add_subcommand("synthesize", "units to waveform through the diffusion decoder");
  std::string units_path;
  synth->add_option("--system", lineage_path, "system lineage JSON")->required();
  synth->add_option("--units", units_path, "unit matrix dump (.emat)")->required();
  synth->add_option("--out", out_path, "output WAV")->required();
  synth->add_option("--seed", seed, "sampling seed");

  auto* evaluate = app.add_subcommand("evaluate", "convert and score the EL test split of a manifest");
  std::string outputs_dir;
  evaluate->add_option("--system", lineage_path, "system lineage JSON")->required();
  evaluate->add_option("--manifest", manifest_path, "manifest.jsonl")->required();
  evaluate->add_option("--out", out_path, "report JSON")->required();
  evaluate->add_option("--outputs", outputs_dir, "directory for converted WAVs (default: next to the report)");
  evaluate->add_option("--seed", seed, "sampling seed");

  auto* report = app.add_subcommand("report", "merge reports and print the table");
  std::vector<std::string> report_paths;
  report->add_option("reports", report_paths, "report JSON files")->required();
  report->add_option("--out", out_path, "merged report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (config_cmd->parsed()) {
      print_json(pipeline::to_json(tiny ? pipeline::tiny_config() : read_config(config_path)));
    } else if (gen->parsed()) {
      corpus::CorpusConfig cfg;
      if (!config_path.empty()) {
        std::ifstream in(config_path);
        require(in.good(), ErrorCode::IoError, "cannot read " + config_path);
        const auto j = nlohmann::json::parse(in, nullptr, false);
        require(!j.is_discarded(), ErrorCode::ConfigError, "malformed JSON in " + config_path);
        cfg = j.contains("corpus") ? corpus::corpus_config_from_json(j.at("corpus")) : corpus::corpus_config_from_json(j);
      }
      const auto c = corpus::build_corpus(cfg, out_dir);
      std::cout << "wrote " << c.manifest.entries.size() << " utterances to " << c.manifest.path.string() << "\n";
    } else if (validate->parsed()) {
      const auto m = corpus::load_manifest(manifest_path);
      const auto problems = corpus::validate_manifest(m);
      for (const auto& p : problems) std::cout << p << "\n";
      if (!problems.empty()) return kExitConfig;
      std::cout << "ok: " << m.entries.size() << " entries\n";
    } else if (train->parsed()) {
      pipeline::Experiment exp(read_config(config_path), root, log_line);
      pipeline::StageArtifact art;
      if (train_rec->parsed()) {
        art = exp.recognizer(rec_stage);
      } else if (train_units->parsed()) {
        art = exp.units();
      } else if (train_al->parsed()) {
        std::optional<alignment::Stage> last;
        if (!al_stage.empty()) last = alignment::stage_from_string(al_stage);
        art = exp.alignment(exp.config().system(system_id), last);
      } else {
        art = exp.synthesis(phase);
      }
      std::cout << art.path.string() << "\n";
    } else if (run->parsed()) {
      pipeline::RunOptions opts;
      opts.systems = systems;
      opts.evaluate = !no_eval;
      const auto result = pipeline::run_experiment(read_config(config_path), root, opts, log_line);
      for (const auto& l : result.lineages) {
        std::cout << "system " << l.system_id << ": " << (fs::path(root) / "lineages" / (l.system_id + ".json")).string()
                  << "\n";
      }
      if (opts.evaluate) std::cout << result.report.render_table();
    } else if (bnf_extract->parsed()) {
      const auto rec = recognition::load_recognizer(recognizer_path);
      const auto audio = read_wav(in_path);
      const auto b = recognition::extract_bnf(*rec, dsp::mel_spectrogram(audio.samples));
      write_matrix(out_path, b.frames, DType::Float32);
      std::cout << b.frames.rows() << " x " << b.frames.cols() << "\n";
    } else if (convert->parsed()) {
      const auto meta = pipeline::convert_file(pipeline::SystemLineage::load(lineage_path), in_path, out_path, seed);
      if (!meta_path.empty()) {
        std::ofstream(meta_path) << meta.to_json().dump(2) << "\n";
      }
      print_json(meta.to_json());
    } else if (synth->parsed()) {
      pipeline::Converter conv(pipeline::SystemLineage::load(lineage_path));
      const Vector wav = conv.synthesize_units(read_matrix(units_path), seed);
      write_wav(out_path, wav, kSampleRate);
    } else if (evaluate->parsed()) {
      const auto lineage = pipeline::SystemLineage::load(lineage_path);
      const auto manifest = corpus::load_manifest(manifest_path);
      std::vector<const corpus::ManifestEntry*> sources;
      for (const auto& e : manifest.entries) {
        if (e.speech_type == SpeechType::El && e.split == corpus::Split::Test && e.parallel_id) sources.push_back(&e);
      }
      require(!sources.empty(), ErrorCode::ConfigError, "manifest has no EL test utterances with references");
      const fs::path dir = outputs_dir.empty() ? fs::path(out_path).parent_path() / ("outputs_" + lineage.system_id)
                                               : fs::path(outputs_dir);
      fs::create_directories(dir);
      pipeline::Converter conv(lineage);
      for (const auto* e : sources) {
        const Vector wav = conv.convert(read_wav(manifest.resolve(*e)).samples, seed);
        write_wav(dir / (e->utterance_id + ".wav"), wav, kSampleRate);
      }
      const auto cer_model =
          recognition::load_recognizer(lineage.artifact(pipeline::SystemLineage::kCerRecognizer).path);
      const eval::SystemDescriptor desc{lineage.system_id, pipeline::inputs_label(lineage.spec),
                                        pipeline::outputs_label(lineage.spec), pipeline::pretraining_label(lineage.spec)};
      eval::EvalReport rep;
      rep.rows.push_back(eval::evaluate_system(desc, manifest, sources, dir, *cer_model).row);
      rep.save(out_path);
      std::cout << rep.render_table();
    } else if (report->parsed()) {
      eval::EvalReport merged;
      for (const auto& p : report_paths) {
        const auto r = eval::EvalReport::load(p);
        merged.rows.insert(merged.rows.end(), r.rows.begin(), r.rows.end());
      }
      for (const auto& r : merged.rows) eval::validate_row(r);
      if (!out_path.empty()) merged.save(out_path);
      std::cout << merged.render_table();
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::ConfigError ? kExitConfig : kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return 0;
}
