#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

namespace elvc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Index into the phoneme inventory.
using Symbol = int;
using SymbolSequence = std::vector<Symbol>;

enum class SpeechType { Typical, El };

inline const char* to_string(SpeechType t) { return t == SpeechType::El ? "EL" : "TYPICAL"; }

SpeechType speech_type_from_string(const std::string& s);

constexpr int kSampleRate = 16000;

}  // namespace elvc
