/* Minimal C client: generate a corpus, pretrain, unlearn one class, evaluate. */
#include <stdio.h>
#include <string.h>

#include "cliperase.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        CeStatus s_ = (call);                                              \
        if (s_ != CE_STATUS_OK) {                                          \
            fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,        \
                    ce_last_error());                                      \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    CeCorpus *corpus = NULL;
    CeModel *model = NULL, *snapshot = NULL, *unlearned = NULL;
    char *report = NULL;
    CeModelInfo info;

    CHECK(ce_corpus_generate("{\"num_classes\": 4, \"pairs_per_class\": 20}", &corpus));
    CHECK(ce_model_init(NULL, 0, &model));
    CHECK(ce_model_info(model, &info));
    CHECK(ce_pretrain(model, corpus, "{\"epochs\": 3}"));
    CHECK(ce_model_snapshot(model, &snapshot));

    double zeros[1] = {0.0};
    if (ce_model_set_params(snapshot, zeros, 1) != CE_STATUS_FROZEN_MUTATION) {
        fprintf(stderr, "snapshot accepted new parameters\n");
        return 1;
    }

    CHECK(ce_unlearn(model, corpus, "class:0", 0, "{\"epochs\": 2}", &unlearned));
    CHECK(ce_evaluate(unlearned, corpus, "class:0", 0, &report));
    if (strstr(report, "\"forget\"") == NULL) {
        fprintf(stderr, "unexpected report: %s\n", report);
        return 1;
    }
    printf("corpus %zu samples, %zu parameters, report %zu bytes\n", ce_corpus_len(corpus), info.num_params,
           strlen(report));

    ce_string_free(report);
    ce_model_free(unlearned);
    ce_model_free(snapshot);
    ce_model_free(model);
    ce_corpus_free(corpus);
    return 0;
}
