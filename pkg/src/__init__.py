# LumiProbe Source Package
