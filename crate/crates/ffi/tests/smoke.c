#include <stdio.h>
#include <string.h>

#include "permnm.h"

#define CHECK(expr)                                                        \
    do {                                                                   \
        PnmStatus s_ = (expr);                                             \
        if (s_ != PNM_STATUS_OK) {                                         \
            char msg[256];                                                 \
            pnm_last_error_message(msg, sizeof msg);                       \
            fprintf(stderr, "%s: %s (%s)\n", #expr, pnm_status_name(s_), msg); \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    const double data[9] = {0.1, 0.9, 0.0, 0.8, 0.1, 0.1, 0.1, 0.0, 0.9};
    PnmMatrix *m = NULL;
    CHECK(pnm_matrix_new(3, 3, data, &m));
    size_t perm[3];
    double objective = 0.0;
    CHECK(pnm_solve_lsa(m, perm, 3, &objective));
    pnm_matrix_free(m);
    if (perm[0] != 1 || perm[1] != 0 || perm[2] != 2) {
        fprintf(stderr, "unexpected permutation\n");
        return 1;
    }

    char *count = NULL;
    CHECK(pnm_count_partitions(12, 4, &count));
    int ok = strcmp(count, "5775") == 0;
    pnm_string_free(count);
    if (!ok) {
        return 1;
    }

    if (pnm_count_partitions(10, 4, &count) != PNM_STATUS_INVALID_ARGUMENT) {
        return 1;
    }
    printf("permnm %s ok\n", pnm_version());
    return 0;
}
