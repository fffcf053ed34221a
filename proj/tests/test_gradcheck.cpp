// Analytic-vs-numeric gradient agreement for the full training-step graph
// on the double-precision micro model.

#include <doctest.h>

#include "gradcheck.hpp"

TEST_CASE("training-step gradients match central differences on the micro model") {
    gradcheck::Report rep = gradcheck::run_micro_gradcheck(4242, 32, 1e-3);
    CHECK(rep.checked == 32);
    CHECK(rep.max_rel_err < 1e-3);
    CHECK(rep.pass);
}

TEST_CASE("gradient agreement holds across seeds") {
    for (std::uint64_t seed : {7ULL, 99ULL}) {
        gradcheck::Report rep = gradcheck::run_micro_gradcheck(seed, 16, 1e-3);
        CHECK(rep.pass);
    }
}
