#include <stdio.h>
#include <string.h>

#include "spider.h"

#define CHECK(cond)                                                     \
    do {                                                                \
        if (!(cond)) {                                                  \
            fprintf(stderr, "line %d: %s (%s)\n", __LINE__, #cond,      \
                    spider_last_error() ? spider_last_error() : "-");   \
            return 1;                                                   \
        }                                                               \
    } while (0)

int main(void) {
    SpiderKeyPair *kp = NULL;
    SpiderKeyPair *other = NULL;
    SpiderBuffer *sealed = NULL;
    SpiderBuffer *opened = NULL;
    uint8_t pk[32];
    const char *msg = "hello from C";
    char digest[65] = {0};
    double draws[4];
    double sens = 0.0;

    CHECK(spider_keypair_generate(&kp) == SPIDER_STATUS_OK);
    CHECK(spider_keypair_generate(&other) == SPIDER_STATUS_OK);
    CHECK(spider_keypair_public_key(kp, pk) == SPIDER_STATUS_OK);

    CHECK(spider_seal((const uint8_t *)msg, strlen(msg), pk, &sealed) == SPIDER_STATUS_OK);
    CHECK(spider_buffer_len(sealed) == 97 + strlen(msg));
    CHECK(spider_open(spider_buffer_data(sealed), spider_buffer_len(sealed), kp, &opened) == SPIDER_STATUS_OK);
    CHECK(spider_buffer_len(opened) == strlen(msg));
    CHECK(memcmp(spider_buffer_data(opened), msg, strlen(msg)) == 0);
    spider_buffer_free(opened);
    opened = NULL;

    CHECK(spider_open(spider_buffer_data(sealed), spider_buffer_len(sealed), other, &opened) ==
          SPIDER_STATUS_WRONG_RECIPIENT);
    CHECK(spider_last_error() != NULL);

    CHECK(spider_pseudonym("abc", NULL, 0, digest) == SPIDER_STATUS_OK);
    CHECK(strcmp(digest, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad") == 0);

    CHECK(spider_laplace_samples(1.0, 42, draws, 4) == SPIDER_STATUS_OK);
    CHECK(spider_laplace_samples(-1.0, 42, draws, 4) == SPIDER_STATUS_INVALID_ARGUMENT);

    CHECK(spider_sensitivity("{\"kind\":\"histogram\",\"group_by\":\"c\",\"epsilon\":1}", &sens) ==
          SPIDER_STATUS_OK);
    CHECK(sens == 2.0);
    CHECK(spider_sensitivity(NULL, &sens) == SPIDER_STATUS_NULL_ARGUMENT);

    spider_buffer_free(sealed);
    spider_keypair_free(kp);
    spider_keypair_free(other);
    printf("ok %s\n", spider_version());
    return 0;
}
