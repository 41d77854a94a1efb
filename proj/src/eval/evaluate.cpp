#include "elvc/eval/evaluate.hpp"

#include <cmath>

#include "elvc/core/error.hpp"
#include "elvc/core/wav.hpp"
#include "elvc/corpus/phonemes.hpp"
#include "elvc/eval/metrics.hpp"

namespace elvc::eval {

SystemEvaluation evaluate_system(const SystemDescriptor& system, const corpus::Manifest& manifest,
                                 std::span<const corpus::ManifestEntry* const> sources,
                                 const std::filesystem::path& outputs_dir,
                                 const recognition::RecognizerModel& recognizer) {
  require(!sources.empty(), ErrorCode::EmptyInput, "evaluate_system: no test utterances");
  for (const auto* src : sources) {
    const auto path = outputs_dir / (src->utterance_id + ".wav");
    require(std::filesystem::exists(path), ErrorCode::IoError, "missing converted output " + path.string());
  }
  SystemEvaluation result;
  std::vector<double> fa, fb;
  double mcd_sum = 0.0;
  std::size_t edits = 0, ref_len = 0;
  for (const auto* src : sources) {
    const corpus::ManifestEntry* ref = src;
    if (src->parallel_id) {
      ref = manifest.find(*src->parallel_id);
      require(ref != nullptr, ErrorCode::InvalidInput, "no reference for " + src->utterance_id);
    }
    const Vector ref_wav = read_wav(manifest.resolve(*ref)).samples;
    const Vector out_wav = read_wav(outputs_dir / (src->utterance_id + ".wav")).samples;
    const auto ref_mcep = dsp::mel_cepstrum(ref_wav);
    const auto out_mcep = dsp::mel_cepstrum(out_wav);
    const auto dtw = dtw_align(out_mcep, ref_mcep);
    UtteranceScore score;
    score.utterance_id = src->utterance_id;
    score.mcd_db = mcd_along(out_mcep, ref_mcep, dtw.path);
    const SymbolSequence truth = corpus::parse_transcript(ref->transcript);
    const SymbolSequence hyp = recognition::decode(recognizer, dsp::mel_spectrogram(out_wav));
    score.edits = edit_distance<Symbol>(truth, hyp);
    score.ref_length = truth.size();
    const auto f_out = dsp::extract_f0(out_wav);
    const auto f_ref = dsp::extract_f0(ref_wav);
    for (const auto& [i, j] : dtw.path) {
      if (i < f_out.size() && j < f_ref.size() && f_out.voiced[static_cast<std::size_t>(i)] &&
          f_ref.voiced[static_cast<std::size_t>(j)]) {
        fa.push_back(f_out.f0_hz[i]);
        fb.push_back(f_ref.f0_hz[j]);
        ++score.voiced_pairs;
      }
    }
    mcd_sum += score.mcd_db;
    edits += score.edits;
    ref_len += score.ref_length;
    result.utterances.push_back(score);
  }
  require(ref_len > 0, ErrorCode::EmptyReference, "evaluate_system: empty references");
  dsp::F0Track ta, tb;
  ta.f0_hz = Eigen::Map<const Vector>(fa.data(), static_cast<Eigen::Index>(fa.size()));
  tb.f0_hz = Eigen::Map<const Vector>(fb.data(), static_cast<Eigen::Index>(fb.size()));
  ta.voiced.assign(fa.size(), true);
  tb.voiced.assign(fb.size(), true);
  const auto f0 = f0_metrics(ta, tb, diagonal_path(static_cast<Eigen::Index>(fa.size())));

  EvalRow& row = result.row;
  row.system_id = system.system_id;
  row.inputs = system.inputs;
  row.outputs = system.outputs;
  row.pretraining = system.pretraining;
  row.mcd_db = mcd_sum / static_cast<double>(sources.size());
  row.cer_pct = 100.0 * static_cast<double>(edits) / static_cast<double>(ref_len);
  row.f0_rmse = f0.rmse_cents;
  row.f0_corr = f0.corr;
  row.utterances = sources.size();
  validate_row(row);
  return result;
}

}  // namespace elvc::eval
