#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "zcbm/pipeline.hpp"
#include "zcbm/provider.hpp"

namespace zcbm {

enum class EditOp { kDelete, kRestore, kInsert };

std::string_view to_string(EditOp op);
EditOp parse_edit_op(std::string_view name);

struct EditRequest {
  EditOp op = EditOp::kDelete;
  std::optional<std::string> concept_text;
  std::optional<std::size_t> index;  // position in the session concept list
};

struct EditRecord {
  std::size_t seq = 0;
  EditOp op = EditOp::kDelete;
  std::string concept_text;
  std::optional<std::size_t> index;
  std::string timestamp;  // ISO 8601, UTC
};

struct SessionConcept {
  std::string text;
  std::vector<float> embedding;
  ConceptSource source = ConceptSource::kRetrieved;
  bool deleted = false;
  std::optional<std::size_t> base_position;  // candidate position in the base prediction
};

/// State of one intervention session. Copies returned by SessionStore are
/// snapshots; the store owns the live state.
struct InterventionSession {
  std::string session_id;
  Prediction base;
  Prediction current;
  std::vector<SessionConcept> concepts;
  SolverConfig solver;
  std::vector<EditRecord> history;
  bool dirty = false;  // edits since the last recompute
};

/// Rebuilds `current` from the base prediction: deleted concepts lose their
/// weight without a re-fit; when any live inserted concept exists, a least
/// squares re-fit runs over the survivors plus the insertions.
Prediction recompute_session(const InterventionSession& session, const ClassSet& classes);

/// In-memory session map with a TTL on last access. Edits to one session are
/// serialized; distinct sessions proceed in parallel.
class SessionStore {
 public:
  using Clock = std::function<std::chrono::system_clock::time_point()>;

  explicit SessionStore(std::chrono::seconds ttl = std::chrono::minutes(30),
                        Clock clock = [] { return std::chrono::system_clock::now(); });

  InterventionSession create(Prediction base, const SolverConfig& solver);
  InterventionSession get(const std::string& id);
  /// Throws UnknownSession / ExpiredSession, InvalidArgument for bad edits.
  InterventionSession edit(const std::string& id, const EditRequest& request,
                           const EmbedFn& embed);
  InterventionSession recompute(const std::string& id, const ClassSet& classes);

  /// Drops expired sessions; returns how many were removed.
  std::size_t sweep();
  std::size_t size() const;

  void save_snapshot(const std::filesystem::path& path) const;
  void load_snapshot(const std::filesystem::path& path);

 private:
  struct Slot {
    std::mutex mu;
    InterventionSession session;
    std::chrono::system_clock::time_point last_access;
  };

  std::shared_ptr<Slot> acquire(const std::string& id);
  std::string new_id();

  std::chrono::seconds ttl_;
  Clock clock_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Slot>> sessions_;
  std::set<std::string> expired_;
  std::uint64_t counter_ = 0;
  std::uint64_t salt_ = 0;
};

}  // namespace zcbm
