#include "vvc/bnb.hpp"

#include <chrono>
#include <cmath>
#include <queue>

namespace vvc::bnb {

std::string to_string(BnbStatus s) {
  switch (s) {
    case BnbStatus::optimal: return "optimal";
    case BnbStatus::infeasible: return "infeasible";
    case BnbStatus::node_limit: return "node_limit";
    case BnbStatus::time_limit: return "time_limit";
    case BnbStatus::numerical_error: return "numerical_error";
  }
  return "unknown";
}

namespace {

struct Node {
  int parent = -1;
  int var = -1;
  int val = -1;
  int depth = 0;
  double bound = -conic::kInf;
};

}  // namespace

BnbResult solve_misocp(const conic::ConicProgram& prog, const BnbOptions& opt) {
  prog.validate();
  BnbResult res;

  std::vector<int> bin_vars;
  for (int i = 0; i < prog.n_vars(); ++i)
    if (prog.is_binary[i]) bin_vars.push_back(i);

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  conic::ConicProgram scratch = prog;
  std::vector<Node> pool(1);

  using HeapItem = std::pair<double, int>;  // (bound, node id), lowest bound first
  std::priority_queue<HeapItem, std::vector<HeapItem>, std::greater<HeapItem>> heap;

  double inc_obj = conic::kInf;
  // A node whose bound exceeds the incumbent by more than `keep` is fathomed;
  // a preference hook keeps exact ties alive for arbitration.
  const double keep = opt.prefer ? opt.tie_tol : -1e-12;

  int next = 0;
  bool have_next = true;
  BnbStatus stop = BnbStatus::optimal;
  bool stopped_early = false;

  auto best_open_bound = [&] {
    double bd = conic::kInf;
    if (!heap.empty()) bd = heap.top().first;
    if (have_next) bd = std::min(bd, pool[next].bound);
    return bd;
  };

  while (true) {
    if (res.has_incumbent && !opt.prefer) {
      double tol = std::max(opt.abs_gap, opt.rel_gap * std::abs(inc_obj));
      if (best_open_bound() > inc_obj - tol) break;
    }

    int cur = -1;
    if (have_next) {
      cur = next;
      have_next = false;
    } else {
      while (!heap.empty()) {
        auto [bd, id] = heap.top();
        if (res.has_incumbent && bd > inc_obj + keep) {
          heap.pop();
          res.log.push_back({id, pool[id].parent, pool[id].depth, pool[id].var,
                             pool[id].val, bd, "fathom_bound"});
          continue;
        }
        heap.pop();
        cur = id;
        break;
      }
    }
    if (cur < 0) break;

    if (res.nodes >= opt.max_nodes || (opt.time_limit_s > 0.0 && elapsed() > opt.time_limit_s)) {
      stop = res.nodes >= opt.max_nodes ? BnbStatus::node_limit : BnbStatus::time_limit;
      stopped_early = true;
      next = cur;  // return the node to the open set so the bound stays honest
      have_next = true;
      break;
    }

    const Node nd = pool[cur];
    for (int b : bin_vars) {
      scratch.lb[b] = prog.lb[b];
      scratch.ub[b] = prog.ub[b];
    }
    for (int a = cur; a != 0; a = pool[a].parent) {
      scratch.lb[pool[a].var] = pool[a].val;
      scratch.ub[pool[a].var] = pool[a].val;
    }

    auto rel = conic::solve_socp(scratch, opt.socp);
    ++res.nodes;

    auto log_as = [&](double bound, const char* outcome) {
      res.log.push_back({cur, nd.parent, nd.depth, nd.var, nd.val, bound, outcome});
    };
    auto push_children = [&](int var, int near_val, double bound, int depth) {
      pool.push_back({cur, var, 1 - near_val, depth, bound});
      heap.push({bound, static_cast<int>(pool.size()) - 1});
      pool.push_back({cur, var, near_val, depth, bound});
      next = static_cast<int>(pool.size()) - 1;
      have_next = true;
    };

    if (rel.status == conic::SolveStatus::primal_infeasible) {
      log_as(conic::kInf, "infeasible");
      continue;
    }

    if (rel.status != conic::SolveStatus::optimal) {
      // The bound is not trustworthy; branch on the first unfixed binary so
      // the children tighten things, or give the node up when none is left.
      ++res.unresolved;
      int bvar = -1;
      for (int b : bin_vars)
        if (scratch.ub[b] - scratch.lb[b] > 0.5) {
          bvar = b;
          break;
        }
      if (bvar >= 0) push_children(bvar, 0, nd.bound, nd.depth + 1);
      log_as(nd.bound, "unresolved");
      continue;
    }

    const double bd = std::max(nd.bound, rel.objective);
    pool[cur].bound = bd;
    if (res.has_incumbent && bd > inc_obj + keep) {
      log_as(bd, "fathom_bound");
      continue;
    }

    // Most fractional unfixed binary; ties by priority, then lowest index.
    int branch_var = -1;
    double best_score = 0.0;
    int best_prio = 0;
    for (int b : bin_vars) {
      if (scratch.ub[b] - scratch.lb[b] < 0.5) continue;
      double v = std::clamp(rel.x[b], 0.0, 1.0);
      double score = std::min(v, 1.0 - v);
      if (score <= opt.int_tol) continue;
      int prio = prog.branch_priority[b];
      bool take = branch_var < 0 || score > best_score + 1e-12 ||
                  (score > best_score - 1e-12 && prio < best_prio);
      if (take) {
        branch_var = b;
        best_score = score;
        best_prio = prio;
      }
    }

    if (branch_var < 0) {
      bool better = !res.has_incumbent || bd < inc_obj - 1e-12;
      bool tie_won = res.has_incumbent && opt.prefer &&
                     std::abs(bd - inc_obj) <= opt.tie_tol && opt.prefer(rel.x, res.incumbent.x);
      if (better || tie_won) {
        res.incumbent = rel;
        res.has_incumbent = true;
        inc_obj = std::min(inc_obj, bd);
        log_as(bd, "incumbent");
      } else {
        log_as(bd, "integral");
      }
      continue;
    }

    push_children(branch_var, rel.x[branch_var] >= 0.5 ? 1 : 0, bd, nd.depth + 1);
    log_as(bd, "branched");
  }

  res.status = stopped_early
                   ? stop
                   : (res.has_incumbent
                          ? BnbStatus::optimal
                          : (res.unresolved > 0 ? BnbStatus::numerical_error
                                                : BnbStatus::infeasible));
  res.objective = res.has_incumbent ? res.incumbent.objective : conic::kInf;
  double open = best_open_bound();
  res.bound = std::min(open, res.has_incumbent ? inc_obj : conic::kInf);
  if (res.has_incumbent)
    res.gap = std::max(0.0, (inc_obj - res.bound) / std::max(1.0, std::abs(inc_obj)));
  return res;
}

}  // namespace vvc::bnb
