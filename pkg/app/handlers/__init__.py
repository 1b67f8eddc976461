# Message handlers module
