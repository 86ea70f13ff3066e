#pragma once

#include <string>
#include <vector>

#include "dkd/lss.hpp"
#include "dkd/voting.hpp"

namespace dkd {

/// One ensemble-mode's census over one sample stream.
struct StreamCensus {
  std::string mode;  // "ri" | "kd" | "dkd"
  CensusRow row;
};

/// Failed-majority counts as CSV, one row per stream. The starred columns
/// are the boosted counts: stream,samples,kd,kd*,dkd,dkd*,ri,ri*. Cells for
/// modes missing on a stream stay empty; sample counts on a shared stream
/// must agree.
std::string census_table_csv(const std::vector<StreamCensus>& cells);

/// {"zeta": .., "per_member": [{"lss": .., "separable": ..}, ..],
///  "ensemble_lss": .., "subsampled_to": ..}
std::string lss_report_json(const LSSReport& report, double zeta);

/// One measured attack-protocol outcome.
struct ProtocolRow {
  std::string protocol;
  std::string mode;
  std::string attack;
  double epsilon = 0.0;
  double ref_accuracy = -1.0;  // < 0: no reference model in this protocol
  double plain_accuracy = 0.0;
  double boosted_accuracy = 0.0;
};

/// protocol,attack,epsilon,mode,ref,plain,boosted — accuracies in [0,1],
/// empty ref cell when the protocol has no reference model.
std::string protocol_table_csv(const std::vector<ProtocolRow>& rows);

/// One grid point of a diversity-weight sweep.
struct SweepRow {
  double zeta = 0.0;
  double ensemble_lss = 0.0;
  bool all_separable = false;
  double plain_accuracy = 0.0;
  double boosted_accuracy = 0.0;
};

/// zeta,ensemble_lss,all_separable,plain_accuracy,boosted_accuracy
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Merges the known artifacts under `run_dir` (recursively: config.json,
/// lss.json, census.csv, protocols.csv, sweep.csv, member histories) into a
/// Markdown digest. With nothing to merge, returns a "nothing to report"
/// line. `found` (optional) receives the artifact count.
std::string merge_report_markdown(const std::string& run_dir, int* found = nullptr);

}  // namespace dkd
