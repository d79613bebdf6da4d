/* Extracts features from an image, self-matches them and checks the results. */
#include <math.h>
#include <stdio.h>
#include "unifeat.h"

static int fail(const char *what, UnifeatStatus s) {
    const char *msg = unifeat_last_error();
    fprintf(stderr, "%s: status %d: %s\n", what, (int)s, msg ? msg : "(none)");
    return 1;
}

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: smoke CHECKPOINT IMAGE\n");
        return 2;
    }
    UnifeatExtractor *ex = NULL;
    UnifeatStatus s = unifeat_extractor_new(NULL, "ss", argv[1], NULL, &ex);
    if (s != UNIFEAT_STATUS_OK) return fail("extractor", s);

    UnifeatFeatures *f = NULL;
    s = unifeat_extract_file(ex, argv[2], &f);
    if (s != UNIFEAT_STATUS_OK) return fail("extract", s);
    size_t n = unifeat_features_count(f), d = unifeat_features_dim(f);
    const float *desc = unifeat_features_descriptors(f);
    for (size_t i = 0; i < n; i++) {
        double norm = 0;
        for (size_t j = 0; j < d; j++) norm += (double)desc[i * d + j] * desc[i * d + j];
        if (fabs(sqrt(norm) - 1.0) > 1e-5) {
            fprintf(stderr, "row %zu has norm %f\n", i, sqrt(norm));
            return 1;
        }
    }

    UnifeatMatches *m = NULL;
    s = unifeat_match(f, f, &m);
    if (s != UNIFEAT_STATUS_OK) return fail("match", s);
    size_t k = unifeat_matches_count(m);
    const uint32_t *pairs = unifeat_matches_pairs(m);
    for (size_t i = 0; i < k; i++) {
        if (pairs[2 * i] != pairs[2 * i + 1]) {
            fprintf(stderr, "match %zu pairs %u with %u\n", i, pairs[2 * i], pairs[2 * i + 1]);
            return 1;
        }
    }

    UnifeatFeatures *missing = NULL;
    s = unifeat_extract_file(ex, "/nonexistent/image.png", &missing);
    if (s != UNIFEAT_STATUS_IO || missing != NULL || unifeat_last_error() == NULL)
        return fail("missing file", s);

    printf("keypoints %zu dim %zu matches %zu version %s\n", n, d, k, unifeat_version());
    unifeat_matches_free(m);
    unifeat_features_free(f);
    unifeat_extractor_free(ex);
    return 0;
}
