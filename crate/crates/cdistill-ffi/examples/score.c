/* Scores one decoding step through the C interface.
 *
 * Build from the repository root after `cargo build --release`:
 *
 *   gcc -I crates/cdistill-ffi/include crates/cdistill-ffi/examples/score.c \
 *       target/release/libcdistill_ffi.a -lpthread -ldl -lm -o score
 */
#include <stdio.h>
#include "cdistill.h"

int main(void) {
    double expert[4] = {0.5, 0.25, 0.125, 0.125};
    double amateur[4] = {0.25, 0.25, 0.25, 0.25};
    double kl = 0.0, target[4];
    bool selected = false;
    uint32_t support[4];
    size_t support_len = 0;

    CdStatus st = cd_score_step(expert, amateur, 4, /*alpha=*/0.3, /*beta=*/0.1,
                                /*epsilon=*/1e-12, &kl, &selected, support,
                                target, 4, &support_len);
    if (st != CdStatus_Ok) {
        fprintf(stderr, "scoring failed: %s\n", cd_last_error());
        return 1;
    }

    printf("library %s\n", cd_version());
    printf("kl = %.6f, retained = %s\n", kl, selected ? "yes" : "no");
    for (size_t i = 0; i < support_len; i++) {
        printf("  token %u -> %.6f\n", support[i], target[i]);
    }
    return 0;
}
