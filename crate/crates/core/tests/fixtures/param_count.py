"""Shape walk of the default tagger architecture; prints its parameter count."""

n_mels, frames = 96, 256
vert, horiz = (86, 7), (1, 129)
ch, d, heads, d_ff, layers, tags = 64, 128, 8, 256, 2, 8

shapes = [
    (ch, 1) + vert, (ch,),        # vertical conv kernel + bias
    (ch, 1) + horiz, (ch,),       # horizontal conv kernel + bias
    (d, tags), (tags,),           # tagging head
]
for _ in range(layers):
    shapes += [(d, d), (d,)] * 4            # q, k, v, out projections
    shapes += [(d,), (d,)] * 2              # two layer norms
    shapes += [(d, d_ff), (d_ff,), (d_ff, d), (d,)]

total = 0
for s in shapes:
    n = 1
    for e in s:
        n *= e
    total += n
print(total)
