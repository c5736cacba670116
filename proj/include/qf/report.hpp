#pragma once

// Session files, run files and run reports as JSON, plus a plain-text table
// in the shape of the protocol (parameters, instruction, query, answer).

#include <filesystem>
#include <string>

#include "qf/session.hpp"

namespace qf {

// Session object: instruction, query, answer, significance, layer and an
// optional "paraphrases" list. A run file is either a bare array of sessions
// or {"sessions": [...], "probes": [...], "retention": [{query, answer}]}.
Session parse_session_json(const std::string& text);
std::string session_to_json(const Session& s);
RunSpec parse_run_json(const std::string& text);
std::string run_to_json(const RunSpec& spec);
RunSpec load_run_file(const std::filesystem::path& path);

std::string report_to_json(const RunReport& report);
RunReport parse_report_json(const std::string& text);

std::string render_report_table(const RunReport& report);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace qf
