#include "jar/flops.hpp"

#include <algorithm>
#include <vector>

namespace jar {

namespace {
// Every open scope on this thread receives each record.
thread_local std::vector<OpCounter*> active_counters;
}

FlopScope::FlopScope(OpCounter& counter) { active_counters.push_back(&counter); }

FlopScope::~FlopScope() { active_counters.pop_back(); }

namespace detail {
void record_op(const char* op, std::uint64_t flops, std::uint64_t values) {
    for (OpCounter* counter : active_counters) counter->record(op, flops, values);
}
}  // namespace detail

}  // namespace jar
