#include "zcbm/session.hpp"

#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "zcbm/error.hpp"
#include "zcbm/serialize.hpp"

namespace zcbm {

namespace {

std::vector<SessionConcept> initial_concepts(const Prediction& base) {
  std::vector<SessionConcept> out;
  for (const auto& c : base.concepts) {
    auto row = base.candidate_embeddings.row(c.position);
    out.push_back({c.text, std::vector<float>(row.begin(), row.end()),
                   base.candidates[c.position].source, false, c.position});
  }
  return out;
}

std::optional<std::size_t> find_concept(const std::vector<SessionConcept>& concepts,
                                        const std::string& text) {
  const std::string folded = fold_concept(text);
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    if (fold_concept(concepts[i].text) == folded) return i;
  }
  return std::nullopt;
}

std::size_t resolve_target(const std::vector<SessionConcept>& concepts, const EditRequest& req) {
  if (req.index) {
    if (*req.index >= concepts.size()) {
      fail(ErrorCode::kInvalidArgument, "concept index " + std::to_string(*req.index) +
                                            " out of range (" +
                                            std::to_string(concepts.size()) + " concepts)");
    }
    return *req.index;
  }
  if (req.concept_text) {
    if (auto i = find_concept(concepts, *req.concept_text)) return *i;
    fail(ErrorCode::kInvalidArgument, "no concept '" + *req.concept_text + "' in session");
  }
  fail(ErrorCode::kInvalidArgument, "edit needs a concept or an index");
}

}  // namespace

std::string_view to_string(EditOp op) {
  switch (op) {
    case EditOp::kDelete: return "delete";
    case EditOp::kRestore: return "restore";
    case EditOp::kInsert: return "insert";
  }
  return "unknown";
}

EditOp parse_edit_op(std::string_view name) {
  if (name == "delete") return EditOp::kDelete;
  if (name == "restore") return EditOp::kRestore;
  if (name == "insert") return EditOp::kInsert;
  fail(ErrorCode::kInvalidArgument, "unknown edit op '" + std::string(name) + "'");
}

Prediction recompute_session(const InterventionSession& session, const ClassSet& classes) {
  std::vector<std::size_t> deleted;
  std::vector<InsertedConcept> inserted;
  for (const auto& c : session.concepts) {
    if (c.source == ConceptSource::kInserted) {
      if (!c.deleted) inserted.push_back({c.text, EmbeddingVector{c.embedding, true}});
    } else if (c.deleted && c.base_position) {
      deleted.push_back(*c.base_position);
    }
  }
  Prediction p = zero_weights(session.base, classes, deleted);
  if (!inserted.empty()) return intervene_insert(p, classes, inserted);
  return p;
}

SessionStore::SessionStore(std::chrono::seconds ttl, Clock clock)
    : ttl_(ttl), clock_(std::move(clock)) {
  std::random_device rd;
  salt_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

std::string SessionStore::new_id() {
  std::mt19937_64 mix(salt_ ^ (++counter_ * 0x9E3779B97F4A7C15ull));
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << mix();
  return os.str();
}

InterventionSession SessionStore::create(Prediction base, const SolverConfig& solver) {
  auto slot = std::make_shared<Slot>();
  slot->session.concepts = initial_concepts(base);
  slot->session.current = base;
  slot->session.base = std::move(base);
  slot->session.solver = solver;
  slot->last_access = clock_();
  std::lock_guard lock(mu_);
  std::string id;
  do {
    id = new_id();
  } while (sessions_.contains(id));
  slot->session.session_id = id;
  sessions_.emplace(id, slot);
  return slot->session;
}

std::shared_ptr<SessionStore::Slot> SessionStore::acquire(const std::string& id) {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) {
    if (expired_.contains(id)) fail(ErrorCode::kExpiredSession, "session " + id + " expired");
    fail(ErrorCode::kUnknownSession, "no session " + id);
  }
  const auto now = clock_();
  std::shared_ptr<Slot> slot = it->second;
  // last_access is only written under the store lock.
  if (now - slot->last_access > ttl_) {
    sessions_.erase(it);
    expired_.insert(id);
    fail(ErrorCode::kExpiredSession, "session " + id + " expired");
  }
  slot->last_access = now;
  return slot;
}

InterventionSession SessionStore::get(const std::string& id) {
  auto slot = acquire(id);
  std::lock_guard lock(slot->mu);
  return slot->session;
}

InterventionSession SessionStore::edit(const std::string& id, const EditRequest& request,
                                       const EmbedFn& embed) {
  auto slot = acquire(id);
  std::lock_guard lock(slot->mu);
  auto& s = slot->session;
  EditRecord record;
  record.op = request.op;
  record.index = request.index;

  switch (request.op) {
    case EditOp::kDelete:
    case EditOp::kRestore: {
      const std::size_t i = resolve_target(s.concepts, request);
      s.concepts[i].deleted = request.op == EditOp::kDelete;
      record.concept_text = s.concepts[i].text;
      record.index = i;
      break;
    }
    case EditOp::kInsert: {
      if (!request.concept_text || fold_concept(*request.concept_text).empty()) {
        fail(ErrorCode::kInvalidArgument, "insert needs a non-empty concept");
      }
      const std::string& text = *request.concept_text;
      record.concept_text = text;
      if (auto existing = find_concept(s.concepts, text)) {
        s.concepts[*existing].deleted = false;
        record.index = *existing;
        break;
      }
      const EmbeddingMatrix fetched = embed({text});
      if (fetched.count() != 1) {
        fail(ErrorCode::kProviderBadResponse, "expected one embedding for '" + text + "'");
      }
      if (fetched.dim() != s.base.input.dim()) {
        fail(ErrorCode::kDimensionMismatch, "embedding for '" + text + "' has dimension " +
                                                std::to_string(fetched.dim()) + ", expected " +
                                                std::to_string(s.base.input.dim()));
      }
      s.concepts.push_back({text, normalize(fetched.row(0)).values, ConceptSource::kInserted,
                            false, std::nullopt});
      record.index = s.concepts.size() - 1;
      break;
    }
  }
  record.seq = s.history.size() + 1;
  record.timestamp = format_timestamp(clock_());
  s.history.push_back(std::move(record));
  s.dirty = true;
  return s;
}

InterventionSession SessionStore::recompute(const std::string& id, const ClassSet& classes) {
  auto slot = acquire(id);
  std::lock_guard lock(slot->mu);
  auto& s = slot->session;
  s.current = recompute_session(s, classes);
  s.dirty = false;
  return s;
}

std::size_t SessionStore::sweep() {
  std::lock_guard lock(mu_);
  const auto now = clock_();
  std::size_t removed = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - it->second->last_access > ttl_) {
      expired_.insert(it->first);
      it = sessions_.erase(it);
      ++removed;
    } else {
      ++it;
    }
  }
  return removed;
}

std::size_t SessionStore::size() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

void SessionStore::save_snapshot(const std::filesystem::path& path) const {
  std::vector<std::shared_ptr<Slot>> slots;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, slot] : sessions_) slots.push_back(slot);
  }
  nlohmann::json doc = {{"version", 1}, {"sessions", nlohmann::json::array()}};
  for (const auto& slot : slots) {
    std::lock_guard lock(slot->mu);
    doc["sessions"].push_back(session_state_to_json(slot->session));
  }
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot write " + tmp);
    out << doc.dump();
  }
  std::filesystem::rename(tmp, path);
}

void SessionStore::load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open session snapshot " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIo, path.string() + ": " + e.what());
  }
  const auto now = clock_();
  std::lock_guard lock(mu_);
  for (const auto& item : doc.at("sessions")) {
    auto slot = std::make_shared<Slot>();
    slot->session = session_state_from_json(item);
    slot->last_access = now;
    sessions_[slot->session.session_id] = std::move(slot);
  }
}

}  // namespace zcbm
