#pragma once

#include <string>
#include <vector>

namespace cdit {

struct PropertyResult {
    std::string name;
    double measured = 0;   // worst observed error
    double tolerance = 0;  // pass iff measured <= tolerance
    bool pass = false;
};

struct VerifyOptions {
    // Verification-only fault injection; "leak-mask" flips one conditional
    // mask entry so the zero-leak property must fail.
    std::string fault;
};

// Every registered invariant, one result per property, on small throwaway
// models. Deterministic.
std::vector<PropertyResult> run_verification(const VerifyOptions& options);

}  // namespace cdit
