
from fusemerge import constants

def char_tokenize(text):
    return list(text)

def char_pair_tokenize(text):
    """Second toy tokenizer: consecutive character pairs ("abcde" -> ["ab", "cd", "e"])
    """
    return [text[i:i + 2] for i in range(0, len(text), 2)]

TOKENIZERS = {
    "char": char_tokenize,
    "char-pair": char_pair_tokenize,
}

def build_vocab(texts, tokenize=char_tokenize):
    """Token strings indexed by id; id 0 is reserved for unknown tokens
    """
    tokens = set()

    for text in texts:
        tokens.update(tokenize(text))

    tokens.discard(constants.UNK_TOKEN)

    return [constants.UNK_TOKEN] + sorted(tokens)

def build_char_vocab(texts):
    return build_vocab(texts, tokenize=char_tokenize)

def vocab_index(vocab):
    """token string -> id
    """
    return {token: idx for idx, token in enumerate(vocab)}

def encode(tokens, index):
    return [index.get(token, constants.UNK_ID) for token in tokens]
